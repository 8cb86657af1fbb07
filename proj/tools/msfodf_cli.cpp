// msfodf command-line tool: phantoms, classical fits, training, prediction and benchmarks.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "msfodf/msfodf.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace msfodf;

namespace {

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  json j = detail::read_json_file(path);
  detail::require(j.is_object(), "config " + path + " must be a JSON object");
  return j;
}

/// Copies a flag value into the config when the flag was given on the command line.
template <class T>
void override_key(json& cfg, const std::string& key, const CLI::Option* opt, const T& value) {
  if (opt->count() > 0) cfg[key] = value;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << text;
  if (!out) throw ValidationError("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

VoxelDataset require_dataset(const std::string& path) {
  if (!fs::exists(path)) throw MissingArtifactError("missing dataset " + path);
  return load_dataset(path);
}

ShellMask mask_or_all(const json& cfg, int k) {
  if (!cfg.contains("mask") || cfg["mask"].is_null()) return ShellMask::all(k);
  return ShellMask::parse(cfg["mask"].get<std::string>());
}

template <class T>
T get_or(const json& cfg, const std::string& key, T fallback) {
  try {
    return cfg.value(key, fallback);
  } catch (const json::exception& e) {
    throw ValidationError("config key '" + key + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------
// phantom gen

struct GenArgs {
  std::string config, out, rescan, bval, bvec, fsl_prefix;
  std::uint64_t seed = 0;
  long long n_voxels = 0;
  double snr = 0.0;
  bool noiseless = false;
  int per_shell = 0;
  std::vector<double> bvals;
  CLI::Option *o_n, *o_snr, *o_per_shell, *o_bvals;
};

int run_gen(const GenArgs& a) {
  json cfg = load_config(a.config);
  override_key(cfg, "n_voxels", a.o_n, a.n_voxels);
  override_key(cfg, "snr", a.o_snr, a.snr);
  if (a.noiseless) cfg["snr"] = nullptr;
  cfg["seed"] = a.seed;
  json scheme = cfg.value("scheme", json::object());
  override_key(scheme, "per_shell", a.o_per_shell, a.per_shell);
  override_key(scheme, "bvals", a.o_bvals, a.bvals);

  const PhantomConfig pc = phantom_config_from_json(cfg);
  const long long n = get_or<long long>(cfg, "n_voxels", 10000);
  detail::require(n >= 1, "n_voxels must be positive");

  GradientTable table;
  if (!a.bval.empty() || !a.bvec.empty()) {
    detail::require(!a.bval.empty() && !a.bvec.empty(), "--bval and --bvec must be given together");
    table = parse_bval_bvec(read_text(a.bval), read_text(a.bvec), kDefaultShellTolerance,
                            get_or<std::vector<double>>(scheme, "bvals", kDefaultNominalBvalues));
  } else {
    table = make_scheme(get_or<int>(scheme, "per_shell", 90),
                        get_or<std::vector<double>>(scheme, "bvals", kDefaultNominalBvalues),
                        get_or<int>(scheme, "n_b0", 6));
  }

  const auto data = gen_dataset(Eigen::Index(n), table, pc, a.seed, !a.rescan.empty());
  save_dataset(data.scan, a.out);
  if (data.rescan) save_dataset(*data.rescan, a.rescan);
  if (!a.fsl_prefix.empty()) {
    const auto [bval, bvec] = format_bval_bvec(table);
    write_text(a.fsl_prefix + ".bval", bval);
    write_text(a.fsl_prefix + ".bvec", bvec);
  }
  std::printf("wrote %lld voxels x %lld measurements to %s\n", n, static_cast<long long>(table.size()),
              a.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// fit sh / fit shore

struct FitArgs {
  std::string config, data, out, mask;
  int order = 0;
  double reg = 0.0, md = 0.0;
  CLI::Option *o_mask, *o_order, *o_reg, *o_md;
};

int run_fit_sh(const FitArgs& a) {
  json cfg = load_config(a.config);
  override_key(cfg, "mask", a.o_mask, a.mask);
  override_key(cfg, "order", a.o_order, a.order);
  override_key(cfg, "reg", a.o_reg, a.reg);
  const VoxelDataset ds = require_dataset(a.data);
  const ShellMask mask = mask_or_all(cfg, ds.table.num_shells());
  check_mask(mask, ds.table);
  const int order = get_or<int>(cfg, "order", kFodfOrder);
  const double reg = get_or<double>(cfg, "reg", kDefaultLaplaceReg);
  detail::check_order(order);

  std::vector<int> shells;
  std::vector<ShFitter> fitters;
  for (int k = 0; k < ds.table.num_shells(); ++k) {
    if (!mask[k]) continue;
    shells.push_back(k);
    fitters.emplace_back(ds.table.shell_directions(k), order, reg);
  }
  json voxels = json::array();
  for (Eigen::Index v = 0; v < ds.n_voxels(); ++v) {
    const Eigen::VectorXd s = normalize_by_b0(ds.signals.row(v).cast<double>().transpose(), ds.table);
    json row = json::array();
    for (size_t i = 0; i < shells.size(); ++i) {
      const auto& idx = ds.table.shell_indices(shells[i]);
      Eigen::VectorXd x(Eigen::Index(idx.size()));
      for (size_t m = 0; m < idx.size(); ++m) x[Eigen::Index(m)] = s[idx[m]];
      row.push_back(to_json(fitters[i].fit(x)));
    }
    voxels.push_back(std::move(row));
  }
  std::vector<double> bvals;
  for (int k : shells) bvals.push_back(ds.table.nominal_bvalues()[size_t(k)]);
  const json out{{"mask", mask.str()}, {"order", order}, {"reg", reg}, {"shells", bvals}, {"voxels", voxels}};
  write_text(a.out, out.dump() + "\n");
  std::printf("fitted order-%d SH on %zu shells for %lld voxels\n", order, shells.size(),
              static_cast<long long>(ds.n_voxels()));
  return 0;
}

int run_fit_shore(const FitArgs& a) {
  json cfg = load_config(a.config);
  override_key(cfg, "mask", a.o_mask, a.mask);
  override_key(cfg, "order", a.o_order, a.order);
  override_key(cfg, "reg", a.o_reg, a.reg);
  override_key(cfg, "md", a.o_md, a.md);
  const VoxelDataset ds = require_dataset(a.data);
  const ShellMask mask = mask_or_all(cfg, ds.table.num_shells());
  check_mask(mask, ds.table);
  const int order = get_or<int>(cfg, "order", kDefaultShoreOrder);
  const ShoreScale scale = compute_zeta(get_or<double>(cfg, "md", kDefaultMd));
  const ShoreFitter fitter(ds.table, scale, order, mask, get_or<double>(cfg, "reg", kDefaultShoreReg));

  json voxels = json::array();
  for (Eigen::Index v = 0; v < ds.n_voxels(); ++v) {
    const Eigen::VectorXd s = normalize_by_b0(ds.signals.row(v).cast<double>().transpose(), ds.table);
    voxels.push_back(to_json(fitter.fit(s).coeffs));
  }
  const json out{{"mask", mask.str()}, {"underdetermined", fitter.underdetermined()}, {"voxels", voxels}};
  write_text(a.out, out.dump() + "\n");
  std::printf("fitted order-%d SHORE (zeta %.6g) for %lld voxels\n", order, scale.zeta,
              static_cast<long long>(ds.n_voxels()));
  return 0;
}

// ---------------------------------------------------------------------------
// csd fit

struct CsdArgs {
  std::string config, data, out, mask, responses, responses_out;
  CLI::Option* o_mask;
};

int run_csd(const CsdArgs& a) {
  json cfg = load_config(a.config);
  override_key(cfg, "mask", a.o_mask, a.mask);
  const VoxelDataset ds = require_dataset(a.data);
  const ShellMask mask = mask_or_all(cfg, ds.table.num_shells());
  check_mask(mask, ds.table);
  std::string resp_path = a.responses.empty() ? get_or<std::string>(cfg, "responses", "") : a.responses;
  ResponseFunctions resp;
  if (resp_path.empty()) {
    resp = estimate_responses(detail::dataset_tissue(ds), ds.table);
  } else {
    try {
      resp = responses_from_json(detail::read_json_file(resp_path));
    } catch (const json::exception& e) {
      throw ValidationError("malformed responses " + resp_path + ": " + e.what());
    }
  }
  if (!a.responses_out.empty()) write_text(a.responses_out, to_json(resp).dump(2) + "\n");
  const Eigen::MatrixXd pred = oracle_predict(ds.signals, ds.table, resp, mask);
  save_predictions({kOracleName, mask.str(), pred}, a.out);
  std::printf("deconvolved %lld voxels under configuration %s\n", static_cast<long long>(ds.n_voxels()),
              mask.str().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config, data, val, variant, mask, out, trace, schedule;
  std::uint64_t seed = 0;
  int epochs = 0, batch = 0;
  double lr = 0.0, md = 0.0;
  bool deterministic = false, quiet = false;
  CLI::Option *o_variant, *o_mask, *o_epochs, *o_batch, *o_lr, *o_md, *o_schedule;
};

int run_train(const TrainArgs& a) {
  json cfg = load_config(a.config);
  override_key(cfg, "variant", a.o_variant, a.variant);
  override_key(cfg, "mask", a.o_mask, a.mask);
  override_key(cfg, "epochs", a.o_epochs, a.epochs);
  override_key(cfg, "batch_size", a.o_batch, a.batch);
  override_key(cfg, "lr", a.o_lr, a.lr);
  override_key(cfg, "md", a.o_md, a.md);
  override_key(cfg, "lr_schedule", a.o_schedule, a.schedule);
  cfg["seed"] = a.seed;
  detail::require(cfg.contains("variant"), "--variant is required");

  const Variant v = parse_variant(get_or<std::string>(cfg, "variant", ""));
  const TrainConfig tc = train_config_from_json(cfg);
  std::optional<ShellMask> mask;
  if (cfg.contains("mask") && !cfg["mask"].is_null()) mask = ShellMask::parse(cfg["mask"].get<std::string>());
  const double md = get_or<double>(cfg, "md", kDefaultMd);

  const VoxelDataset train_ds = require_dataset(a.data);
  std::optional<VoxelDataset> val_ds;
  if (!a.val.empty()) val_ds = require_dataset(a.val);

  std::string tag = variant_name(v);
  if (mask) tag += ":" + mask->str();
  const TrainResult r = train(train_ds, val_ds ? &*val_ds : nullptr, v, tc, mask, a.quiet ? "" : tag, md);

  json record = to_json(tc);
  record["variant"] = variant_name(v);
  record["mask"] = mask ? json(mask->str()) : json(nullptr);
  record["md"] = md;
  record["deterministic"] = a.deterministic;
  record["train_dataset"] = detail::dataset_provenance(train_ds);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  save_checkpoint(r.params, a.out, record);
  const std::string trace = a.trace.empty() ? fs::path(a.out).replace_extension(".loss.csv").string() : a.trace;
  write_text(trace, format_loss_trace(r.trace));
  std::printf("saved %s (%lld parameters, %lld steps) and %s\n", a.out.c_str(),
              static_cast<long long>(r.params.values.size()), static_cast<long long>(r.params.step), trace.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// predict / eval

struct PredictArgs {
  std::string model, data, mask, out;
};

int run_predict(const PredictArgs& a) {
  if (!fs::exists(a.model)) throw MissingArtifactError("missing checkpoint " + a.model);
  const EstimatorParams p = load_checkpoint(a.model);
  const VoxelDataset ds = require_dataset(a.data);
  const ShellMask mask = a.mask.empty() ? ShellMask::all(ds.table.num_shells()) : ShellMask::parse(a.mask);
  const FeatureBuilder fb(ds.table, p.shore_md);
  const Eigen::MatrixXd pred = predict_dataset(p, fb, ds.signals, mask);
  save_predictions({fs::path(a.model).filename().string(), mask.str(), pred}, a.out);
  std::printf("predicted %lld voxels under configuration %s\n", static_cast<long long>(pred.rows()),
              mask.str().c_str());
  return 0;
}

struct EvalArgs {
  std::string config, pred, data, rescan_pred, out, csv, md;
  double wm = kWmThreshold;
  CLI::Option* o_wm;
};

int run_eval(const EvalArgs& a) {
  json cfg = load_config(a.config);
  override_key(cfg, "wm_threshold", a.o_wm, a.wm);
  const double wm = get_or<double>(cfg, "wm_threshold", kWmThreshold);
  const Predictions p = load_predictions(a.pred);
  const VoxelDataset ds = require_dataset(a.data);
  detail::require(p.values.rows() == ds.n_voxels(), "predictions cover " + std::to_string(p.values.rows()) +
                                                        " voxels, dataset has " + std::to_string(ds.n_voxels()));
  const Eigen::MatrixXd targets = ds.targets.cast<double>();
  const AccResult acc = eval_acc(p.values, targets, wm);

  EvalReport r;
  r.kind = "eval";
  r.columns = {p.config};
  ReportRow row{p.source, "", {acc.mean}, {eval_vf_mse(p.values, targets)}, {std::nullopt},
                {Eigen::Index(acc.voxels.size())}};
  if (!a.rescan_pred.empty()) {
    const Predictions q = load_predictions(a.rescan_pred);
    detail::require(q.values.rows() == p.values.rows() && q.config == p.config, "mismatched twins");
    row.scan_rescan_acc[0] = scan_rescan_consistency(p.values, q.values, targets, wm).mean;
  }
  r.rows.push_back(std::move(row));
  r.provenance = {{"dataset", detail::dataset_provenance(ds)}, {"wm_threshold", wm}};
  r.validate();
  const std::string csv = format_metrics_csv(r);
  if (!a.out.empty()) write_text(a.out, to_json(r).dump(2) + "\n");
  if (!a.csv.empty()) write_text(a.csv, csv);
  if (!a.md.empty()) write_text(a.md, format_markdown(r));
  std::fputs(csv.c_str(), stdout);
  return 0;
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  std::string config, dataset, rescan, out_dir;
  bool deterministic = false;
};

int run_bench(const BenchArgs& a, bool table2) {
  json cfg = load_config(a.config);
  if (!a.dataset.empty()) cfg["dataset"] = fs::absolute(a.dataset).string();
  if (!a.rescan.empty()) cfg["rescan"] = fs::absolute(a.rescan).string();
  const BenchConfig bc = bench_config_from_json(cfg, fs::path(a.config).parent_path());
  if (!fs::exists(bc.dataset)) throw MissingArtifactError("missing dataset " + bc.dataset.string());
  const EvalReport r = table2 ? run_table2(bc) : run_table1(bc);
  const fs::path dir(a.out_dir);
  fs::create_directories(dir);
  write_text(dir / (r.kind + ".json"), to_json(r).dump(2) + "\n");
  write_text(dir / (r.kind + ".csv"), format_metrics_csv(r));
  write_text(dir / (r.kind + ".md"), format_markdown(r));
  std::fputs(format_markdown(r).c_str(), stdout);
  return 0;
}

int fail(ExitCode code, const char* kind, const std::exception& e) {
  std::fprintf(stderr, "msfodf: %s: %s\n", kind, e.what());
  return static_cast<int>(code);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learned multi-shell fODF estimation on synthetic diffusion phantoms"};
  app.name("msfodf");
  app.require_subcommand(1);

  GenArgs gen;
  auto* phantom = app.add_subcommand("phantom", "Synthetic phantoms")->require_subcommand(1);
  auto* c_gen = phantom->add_subcommand("gen", "Generate a phantom dataset (and optional rescan twin)");
  c_gen->add_option("--config", gen.config, "Phantom config JSON");
  c_gen->add_option("--seed", gen.seed, "Generator seed")->required();
  c_gen->add_option("--out", gen.out, "Dataset sidecar path (.json; payload goes next to it)")->required();
  c_gen->add_option("--rescan", gen.rescan, "Also write a noise twin to this path");
  gen.o_n = c_gen->add_option("--n-voxels", gen.n_voxels, "Number of voxels");
  gen.o_snr = c_gen->add_option("--snr", gen.snr, "Rician SNR relative to s0");
  c_gen->add_flag("--noiseless", gen.noiseless, "Disable noise");
  gen.o_per_shell = c_gen->add_option("--per-shell", gen.per_shell, "Directions per shell");
  gen.o_bvals = c_gen->add_option("--bvals", gen.bvals, "Nominal b-values")->delimiter(',');
  c_gen->add_option("--bval", gen.bval, "FSL bval file defining the acquisition");
  c_gen->add_option("--bvec", gen.bvec, "FSL bvec file defining the acquisition");
  c_gen->add_option("--fsl-prefix", gen.fsl_prefix, "Write the acquisition as <prefix>.bval/.bvec");

  FitArgs fsh, fshore;
  auto* fit = app.add_subcommand("fit", "Classical signal fits")->require_subcommand(1);
  auto* c_sh = fit->add_subcommand("sh", "Per-shell real SH fit of the b0-normalized signal");
  c_sh->add_option("--config", fsh.config, "Fit config JSON");
  c_sh->add_option("--data", fsh.data, "Dataset sidecar")->required();
  c_sh->add_option("--out", fsh.out, "Output JSON")->required();
  fsh.o_mask = c_sh->add_option("--mask", fsh.mask, "Shell configuration bitstring");
  fsh.o_order = c_sh->add_option("--order", fsh.order, "Even SH order");
  fsh.o_reg = c_sh->add_option("--reg", fsh.reg, "Laplace-Beltrami regularization");
  fsh.o_md = nullptr;

  auto* c_shore = fit->add_subcommand("shore", "SHORE fit of the b0-normalized signal");
  c_shore->add_option("--config", fshore.config, "Fit config JSON");
  c_shore->add_option("--data", fshore.data, "Dataset sidecar")->required();
  c_shore->add_option("--out", fshore.out, "Output JSON")->required();
  fshore.o_mask = c_shore->add_option("--mask", fshore.mask, "Shell configuration bitstring");
  fshore.o_order = c_shore->add_option("--order", fshore.order, "Even radial order");
  fshore.o_reg = c_shore->add_option("--reg", fshore.reg, "Tikhonov regularization");
  fshore.o_md = c_shore->add_option("--md", fshore.md, "Mean diffusivity for the scale (mm^2/s)");

  CsdArgs csd;
  auto* csd_cmd = app.add_subcommand("csd", "Multi-shell multi-tissue CSD")->require_subcommand(1);
  auto* c_csd = csd_cmd->add_subcommand("fit", "Deconvolve every voxel; writes predictions");
  c_csd->add_option("--config", csd.config, "CSD config JSON");
  c_csd->add_option("--data", csd.data, "Dataset sidecar")->required();
  c_csd->add_option("--out", csd.out, "Predictions JSON")->required();
  csd.o_mask = c_csd->add_option("--mask", csd.mask, "Shell configuration bitstring");
  c_csd->add_option("--responses", csd.responses, "Responses JSON (default: from the phantom tissue)");
  c_csd->add_option("--responses-out", csd.responses_out, "Write the responses used");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train one estimator variant");
  c_train->add_option("--config", tr.config, "Training config JSON");
  c_train->add_option("--data", tr.data, "Training dataset sidecar")->required();
  c_train->add_option("--val", tr.val, "Validation dataset sidecar");
  c_train->add_option("--seed", tr.seed, "Initialization and sampling seed")->required();
  c_train->add_option("--out", tr.out, "Checkpoint path")->required();
  c_train->add_option("--trace", tr.trace, "Loss trace CSV (default: <out>.loss.csv)");
  tr.o_variant = c_train->add_option("--variant", tr.variant, "fcn-single, fcn-all, dh-shore, dh-sh or dh-sc");
  tr.o_mask = c_train->add_option("--mask", tr.mask, "Training configuration (fcn-single only)");
  tr.o_epochs = c_train->add_option("--epochs", tr.epochs, "Epochs");
  tr.o_batch = c_train->add_option("--batch-size", tr.batch, "Batch size");
  tr.o_lr = c_train->add_option("--lr", tr.lr, "Adam learning rate");
  tr.o_schedule = c_train->add_option("--lr-schedule", tr.schedule, "constant or cosine");
  tr.o_md = c_train->add_option("--md", tr.md, "Mean diffusivity for SHORE inputs");
  c_train->add_flag("--deterministic", tr.deterministic, "Fixed-order reductions (recorded in the checkpoint)");
  c_train->add_flag("--quiet", tr.quiet, "No per-epoch progress");

  PredictArgs pr;
  auto* c_pred = app.add_subcommand("predict", "Run a checkpoint over a dataset; writes predictions");
  c_pred->add_option("--model", pr.model, "Checkpoint")->required();
  c_pred->add_option("--data", pr.data, "Dataset sidecar")->required();
  c_pred->add_option("--mask", pr.mask, "Shell configuration bitstring (default: all shells)");
  c_pred->add_option("--out", pr.out, "Predictions JSON")->required();

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "ACC / VF MSE of predictions against dataset targets");
  c_eval->add_option("--config", ev.config, "Eval config JSON");
  c_eval->add_option("--pred", ev.pred, "Predictions JSON")->required();
  c_eval->add_option("--data", ev.data, "Dataset sidecar holding the targets")->required();
  c_eval->add_option("--rescan-pred", ev.rescan_pred, "Predictions on the rescan twin");
  ev.o_wm = c_eval->add_option("--wm-threshold", ev.wm, "WM rule: target WM fraction above this");
  c_eval->add_option("--out", ev.out, "Report JSON");
  c_eval->add_option("--csv", ev.csv, "Metrics CSV");
  c_eval->add_option("--md", ev.md, "Markdown report");

  BenchArgs b1, b2;
  auto* bench = app.add_subcommand("bench", "Benchmark tables")->require_subcommand(1);
  for (auto [name, args, help] : {std::tuple{"table1", &b1, "Every model under every configuration"},
                                  std::tuple{"table2", &b2, "Single models, dh-sc and the CSD oracle on twins"}}) {
    auto* c = bench->add_subcommand(name, help);
    c->add_option("--config", args->config, "Bench config JSON")->required();
    c->add_option("--out-dir", args->out_dir, "Directory for <table>.json/.csv/.md")->required();
    c->add_option("--dataset", args->dataset, "Override the evaluation dataset");
    c->add_option("--rescan", args->rescan, "Override the rescan twin");
    c->add_flag("--deterministic", args->deterministic, "Fixed-order reductions");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::kValidation);
  }

  try {
    if (c_gen->parsed()) return run_gen(gen);
    if (c_sh->parsed()) return run_fit_sh(fsh);
    if (c_shore->parsed()) return run_fit_shore(fshore);
    if (c_csd->parsed()) return run_csd(csd);
    if (c_train->parsed()) return run_train(tr);
    if (c_pred->parsed()) return run_predict(pr);
    if (c_eval->parsed()) return run_eval(ev);
    if (bench->get_subcommand("table1")->parsed()) return run_bench(b1, false);
    if (bench->get_subcommand("table2")->parsed()) return run_bench(b2, true);
  } catch (const MissingArtifactError& e) {
    return fail(ExitCode::kMissingArtifact, "missing artifact", e);
  } catch (const NumericalError& e) {
    return fail(ExitCode::kNumerical, "numerical failure", e);
  } catch (const ValidationError& e) {
    return fail(ExitCode::kValidation, "invalid input", e);
  } catch (const json::exception& e) {
    return fail(ExitCode::kValidation, "invalid input", e);
  } catch (const fs::filesystem_error& e) {
    return fail(ExitCode::kValidation, "filesystem", e);
  }
  return static_cast<int>(ExitCode::kValidation);
}
