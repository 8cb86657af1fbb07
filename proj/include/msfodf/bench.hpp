#pragma once

// Evaluation harness: ACC and VF metrics over WM voxels, scan-rescan
// consistency, the Wilcoxon signed-rank test, and benchmark reports.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "msfodf/deconv.hpp"
#include "msfodf/errors.hpp"
#include "msfodf/harmonics.hpp"
#include "msfodf/learner.hpp"
#include "msfodf/phantom.hpp"
#include "msfodf/qspace.hpp"

namespace msfodf {

inline constexpr double kWmThreshold = 0.5;
inline constexpr const char* kOracleName = "msmt-csd";

// ---------------------------------------------------------------------------
// Metrics

struct AccResult {
  double mean = 0.0;
  std::vector<Eigen::Index> voxels;  // indices of included voxels
  Eigen::VectorXd per_voxel;         // aligned with `voxels`
};

namespace detail {

/// ACC of two 45-coefficient rows; an isotropic prediction scores 0.
inline double row_acc(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  try {
    return acc(ShCoefficients(kFodfOrder, a.head(kFodfCoeffs)), ShCoefficients(kFodfOrder, b.head(kFodfCoeffs)));
  } catch (const DegenerateFodfError&) {
    return 0.0;
  }
}

inline std::vector<Eigen::Index> wm_voxels(const Eigen::MatrixXd& targets, double threshold) {
  require(targets.cols() >= kFodfCoeffs + 1, "targets need 45 fODF coefficients and a WM fraction");
  std::vector<Eigen::Index> out;
  for (Eigen::Index i = 0; i < targets.rows(); ++i)
    if (targets(i, kFodfCoeffs) > threshold) out.push_back(i);
  if (out.empty()) throw ValidationError("no WM voxels");
  return out;
}

inline AccResult mean_acc_over(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, std::vector<Eigen::Index> voxels) {
  AccResult r;
  r.voxels = std::move(voxels);
  r.per_voxel.resize(Eigen::Index(r.voxels.size()));
  double s = 0.0;
  for (size_t k = 0; k < r.voxels.size(); ++k) {
    const Eigen::Index i = r.voxels[k];
    r.per_voxel[Eigen::Index(k)] = row_acc(a.row(i).transpose(), b.row(i).transpose());
    s += r.per_voxel[Eigen::Index(k)];
  }
  r.mean = s / double(r.voxels.size());
  return r;
}

/// Runs f(i) for i in [0, n) on all hardware threads; f writes only to slot i.
template <class F>
void parallel_for(Eigen::Index n, F&& f) {
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const Eigen::Index nt = std::min<Eigen::Index>(Eigen::Index(hw), std::max<Eigen::Index>(n, 1));
  if (nt <= 1) {
    for (Eigen::Index i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<size_t>(nt));
  for (Eigen::Index t = 0; t < nt; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (Eigen::Index i = t; i < n; i += nt) f(i);
      } catch (...) {
        errors[size_t(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Mean per-voxel ACC over voxels whose target WM fraction exceeds `wm_threshold`.
inline AccResult eval_acc(const Eigen::MatrixXd& predictions, const Eigen::MatrixXd& targets,
                          double wm_threshold = kWmThreshold) {
  detail::require(predictions.rows() == targets.rows(), "prediction and target voxel counts differ");
  detail::require(predictions.cols() >= kFodfCoeffs, "predictions need 45 fODF coefficients");
  return detail::mean_acc_over(predictions, targets, detail::wm_voxels(targets, wm_threshold));
}

/// Mean over voxels and the three tissue fractions of the squared error.
inline double eval_vf_mse(const Eigen::MatrixXd& predictions, const Eigen::MatrixXd& targets) {
  detail::require(predictions.rows() == targets.rows(), "prediction and target voxel counts differ");
  detail::require(predictions.cols() == kTargetWidth && targets.cols() == kTargetWidth, "rows must have 48 entries");
  if (predictions.rows() == 0) return 0.0;
  return (predictions.rightCols(3) - targets.rightCols(3)).squaredNorm() / double(3 * predictions.rows());
}

/// Per-voxel ACC between the fODFs predicted from two noise twins, over WM voxels.
inline AccResult scan_rescan_consistency(const Eigen::MatrixXd& pred_a, const Eigen::MatrixXd& pred_b,
                                         const Eigen::MatrixXd& targets, double wm_threshold = kWmThreshold) {
  detail::require(pred_a.rows() == pred_b.rows() && pred_a.rows() == targets.rows(),
                  "scan and rescan predictions have different voxel counts");
  return detail::mean_acc_over(pred_a, pred_b, detail::wm_voxels(targets, wm_threshold));
}

inline void check_twins(const VoxelDataset& a, const VoxelDataset& b) {
  detail::require(a.n_voxels() == b.n_voxels() && a.signals.cols() == b.signals.cols(),
                  "mismatched twins: shapes differ");
  detail::require(a.targets == b.targets, "mismatched twins: targets differ");
}

inline AccResult scan_rescan_consistency(const EstimatorParams& model, const VoxelDataset& scan_a,
                                         const VoxelDataset& scan_b, const GradientTable& table,
                                         const ShellMask& mask, double wm_threshold = kWmThreshold) {
  check_twins(scan_a, scan_b);
  const FeatureBuilder fb(table, model.shore_md);
  return scan_rescan_consistency(predict_dataset(model, fb, scan_a.signals, mask),
                                 predict_dataset(model, fb, scan_b.signals, mask), scan_a.targets.cast<double>(),
                                 wm_threshold);
}

/// [n x 48] MSMT-CSD predictions under `mask` using the known tissue responses.
inline Eigen::MatrixXd oracle_predict(const FloatMatrix& signals, const GradientTable& table,
                                      const ResponseFunctions& resp, const ShellMask& mask) {
  const MsmtCsd csd(resp, table, mask);
  Eigen::MatrixXd out(signals.rows(), kTargetWidth);
  detail::parallel_for(signals.rows(), [&](Eigen::Index i) {
    const FodfSolution s = csd.fit(signals.row(i).transpose().cast<double>());
    out.row(i).head(kFodfCoeffs) = s.wm_fodf.coeffs.transpose();
    out.row(i).tail(3) = s.vf.transpose();
  });
  return out;
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test

struct WilcoxonResult {
  double statistic = 0.0;  // min(W+, W-)
  double w_plus = 0.0;
  double p_value = 1.0;
  int n = 0;  // non-zero differences
  bool exact = false;
};

enum class WilcoxonMode { kAuto, kExact, kNormal };

namespace detail {

/// Average ranks of |d|, ties sharing the mean rank.
inline std::vector<double> abs_ranks(const std::vector<double>& d) {
  std::vector<size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), size_t(0));
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return std::abs(d[a]) < std::abs(d[b]); });
  std::vector<double> r(d.size());
  for (size_t i = 0; i < idx.size();) {
    size_t j = i;
    while (j + 1 < idx.size() && std::abs(d[idx[j + 1]]) == std::abs(d[idx[i]])) ++j;
    const double avg = 0.5 * double(i + j) + 1.0;
    for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace detail

/// Two-sided signed-rank test on paired samples. Zero differences are dropped.
/// Exact null distribution for n <= 25 (ties handled on doubled ranks), normal
/// approximation with tie correction above.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b,
                                           WilcoxonMode mode = WilcoxonMode::kAuto) {
  detail::require(a.size() == b.size(), "paired samples must have equal length");
  std::vector<double> d;
  for (size_t i = 0; i < a.size(); ++i) {
    detail::require(std::isfinite(a[i]) && std::isfinite(b[i]), "samples must be finite");
    if (a[i] - b[i] != 0.0) d.push_back(a[i] - b[i]);
  }
  if (d.empty()) throw ValidationError("all differences are zero");
  detail::require(d.size() >= 6, "need at least 6 non-zero differences, got " + std::to_string(d.size()));
  const std::vector<double> r = detail::abs_ranks(d);
  WilcoxonResult res;
  res.n = int(d.size());
  for (size_t i = 0; i < d.size(); ++i)
    if (d[i] > 0) res.w_plus += r[i];
  const double total = 0.5 * res.n * (res.n + 1);
  res.statistic = std::min(res.w_plus, total - res.w_plus);
  res.exact = mode == WilcoxonMode::kExact || (mode == WilcoxonMode::kAuto && res.n <= 25);

  if (res.exact) {
    detail::require(res.n <= 60, "exact mode supports at most 60 differences");
    // Counts of sign patterns by doubled positive rank sum.
    const int max_sum = res.n * (res.n + 1);
    std::vector<double> count(size_t(max_sum) + 1, 0.0);
    count[0] = 1.0;
    int reach = 0;
    for (double rk : r) {
      const int w = int(std::lround(2.0 * rk));
      for (int s = reach; s >= 0; --s)
        if (count[size_t(s)] != 0.0) count[size_t(s + w)] += count[size_t(s)];
      reach += w;
    }
    const int obs = int(std::lround(2.0 * res.w_plus));
    double lo = 0.0, hi = 0.0, all = 0.0;
    for (int s = 0; s <= max_sum; ++s) {
      all += count[size_t(s)];
      if (s <= obs) lo += count[size_t(s)];
      if (s >= obs) hi += count[size_t(s)];
    }
    res.p_value = std::min(1.0, 2.0 * std::min(lo, hi) / all);
  } else {
    double tie = 0.0;
    std::vector<double> sorted = r;
    std::sort(sorted.begin(), sorted.end());
    for (size_t i = 0; i < sorted.size();) {
      size_t j = i;
      while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
      const double t = double(j - i);
      tie += t * t * t - t;
      i = j;
    }
    const double n = res.n;
    const double var = n * (n + 1) * (2 * n + 1) / 24.0 - tie / 48.0;
    const double z = (res.w_plus - 0.25 * n * (n + 1)) / std::sqrt(var);
    res.p_value = std::min(1.0, std::erfc(std::abs(z) / std::sqrt(2.0)));
  }
  res.p_value = std::max(res.p_value, std::numeric_limits<double>::min());
  return res;
}

inline WilcoxonResult wilcoxon_signed_rank(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                                           WilcoxonMode mode = WilcoxonMode::kAuto) {
  return wilcoxon_signed_rank(std::vector<double>(a.data(), a.data() + a.size()),
                              std::vector<double>(b.data(), b.data() + b.size()), mode);
}

// ---------------------------------------------------------------------------
// Reports

struct ReportRow {
  std::string model;
  std::string checkpoint;
  std::vector<std::optional<double>> mean_acc;  // one per column
  std::vector<std::optional<double>> vf_mse;
  std::vector<std::optional<double>> scan_rescan_acc;
  std::vector<Eigen::Index> n_voxels;

  bool operator==(const ReportRow&) const = default;
};

struct WilcoxonEntry {
  std::string metric;
  std::string config;
  std::string model_a;
  std::string model_b;
  double statistic = 0.0;
  double p_value = 1.0;
  int n = 0;
  bool exact = false;

  bool operator==(const WilcoxonEntry&) const = default;
};

struct EvalReport {
  std::string kind;                  // "table1" or "table2"
  std::vector<std::string> columns;  // configuration bitstrings
  std::vector<ReportRow> rows;
  std::vector<WilcoxonEntry> tests;
  nlohmann::json provenance = nlohmann::json::object();

  bool operator==(const EvalReport&) const = default;

  const ReportRow& row(const std::string& model) const {
    for (const auto& r : rows)
      if (r.model == model) return r;
    throw ValidationError("report has no row " + model);
  }

  Eigen::Index column(const std::string& config) const {
    for (size_t c = 0; c < columns.size(); ++c)
      if (columns[c] == config) return Eigen::Index(c);
    throw ValidationError("report has no column " + config);
  }

  void validate() const {
    for (const auto& r : rows) {
      detail::require(r.mean_acc.size() == columns.size() && r.vf_mse.size() == columns.size() &&
                          r.scan_rescan_acc.size() == columns.size() && r.n_voxels.size() == columns.size(),
                      "report row " + r.model + " does not span every column");
      for (size_t c = 0; c < columns.size(); ++c) {
        for (const auto* v : {&r.mean_acc[c], &r.scan_rescan_acc[c]})
          if (*v) detail::require(**v >= -1.0 - 1e-12 && **v <= 1.0 + 1e-12, "ACC outside [-1, 1]");
        if (r.vf_mse[c]) detail::require(*r.vf_mse[c] >= 0.0, "negative MSE");
      }
    }
    for (const auto& t : tests) detail::require(t.p_value > 0.0 && t.p_value <= 1.0, "p-value outside (0, 1]");
  }
};

/// Arithmetic mean of the present entries, empty if none.
inline std::optional<double> row_average(const std::vector<std::optional<double>>& v) {
  double s = 0.0;
  int n = 0;
  for (const auto& x : v)
    if (x) {
      s += *x;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return s / n;
}

/// Column marks: 1 best, 2 second best, 0 otherwise. Ties go to the earlier row.
inline std::vector<int> rank_marks(const std::vector<std::optional<double>>& col, bool higher_is_better) {
  std::vector<size_t> order;
  for (size_t i = 0; i < col.size(); ++i)
    if (col[i]) order.push_back(i);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return higher_is_better ? *col[a] > *col[b] : *col[a] < *col[b];
  });
  std::vector<int> marks(col.size(), 0);
  for (size_t k = 0; k < order.size() && k < 2; ++k) marks[order[k]] = int(k) + 1;
  return marks;
}

namespace detail {

inline nlohmann::json opt_json(const std::vector<std::optional<double>>& v) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& x : v) a.push_back(x ? nlohmann::json(*x) : nlohmann::json(nullptr));
  return a;
}

inline std::vector<std::optional<double>> opt_from_json(const nlohmann::json& a) {
  std::vector<std::optional<double>> v;
  for (const auto& x : a) v.push_back(x.is_null() ? std::nullopt : std::optional<double>(x.get<double>()));
  return v;
}

inline std::string fmt(double v, const char* spec = "%.10g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

inline std::vector<std::optional<double>> column_of(const EvalReport& r,
                                                    std::vector<std::optional<double>> ReportRow::*field,
                                                    size_t c) {
  std::vector<std::optional<double>> col;
  for (const auto& row : r.rows) col.push_back((row.*field)[c]);
  return col;
}

}  // namespace detail

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"model", row.model},
                    {"checkpoint", row.checkpoint},
                    {"mean_acc", detail::opt_json(row.mean_acc)},
                    {"vf_mse", detail::opt_json(row.vf_mse)},
                    {"scan_rescan_acc", detail::opt_json(row.scan_rescan_acc)},
                    {"n_voxels", row.n_voxels},
                    {"average_acc", row_average(row.mean_acc) ? nlohmann::json(*row_average(row.mean_acc))
                                                              : nlohmann::json(nullptr)}});
  }
  nlohmann::json marks = nlohmann::json::object();
  for (size_t c = 0; c < r.columns.size(); ++c)
    marks[r.columns[c]] = rank_marks(detail::column_of(r, &ReportRow::mean_acc, c), true);
  nlohmann::json tests = nlohmann::json::array();
  for (const auto& t : r.tests)
    tests.push_back({{"metric", t.metric},
                     {"config", t.config},
                     {"model_a", t.model_a},
                     {"model_b", t.model_b},
                     {"statistic", t.statistic},
                     {"p_value", t.p_value},
                     {"n", t.n},
                     {"exact", t.exact}});
  return {{"kind", r.kind},   {"columns", r.columns},       {"rows", rows},
          {"tests", tests},   {"acc_marks", marks},         {"provenance", r.provenance},
          {"tie_rule", "best and second-best per column; ties go to the earlier row"}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.kind = j.at("kind").get<std::string>();
    r.columns = j.at("columns").get<std::vector<std::string>>();
    for (const auto& row : j.at("rows")) {
      ReportRow x;
      x.model = row.at("model").get<std::string>();
      x.checkpoint = row.value("checkpoint", "");
      x.mean_acc = detail::opt_from_json(row.at("mean_acc"));
      x.vf_mse = detail::opt_from_json(row.at("vf_mse"));
      x.scan_rescan_acc = detail::opt_from_json(row.at("scan_rescan_acc"));
      x.n_voxels = row.at("n_voxels").get<std::vector<Eigen::Index>>();
      r.rows.push_back(std::move(x));
    }
    for (const auto& t : j.at("tests"))
      r.tests.push_back({t.at("metric").get<std::string>(), t.at("config").get<std::string>(),
                         t.at("model_a").get<std::string>(), t.at("model_b").get<std::string>(),
                         t.at("statistic").get<double>(), t.at("p_value").get<double>(), t.at("n").get<int>(),
                         t.at("exact").get<bool>()});
    r.provenance = j.value("provenance", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed report: ") + e.what());
  }
  r.validate();
  return r;
}

/// Metrics CSV, one line per (row, column).
inline std::string format_metrics_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "model,config,mean_acc,vf_mse,scan_rescan_acc,n_voxels\n";
  auto cell = [](const std::optional<double>& v) { return v ? detail::fmt(*v) : std::string(); };
  for (const auto& row : r.rows)
    for (size_t c = 0; c < r.columns.size(); ++c)
      os << row.model << ',' << r.columns[c] << ',' << cell(row.mean_acc[c]) << ',' << cell(row.vf_mse[c]) << ','
         << cell(row.scan_rescan_acc[c]) << ',' << row.n_voxels[c] << '\n';
  return os.str();
}

inline std::string format_markdown(const EvalReport& r) {
  std::ostringstream os;
  struct Section {
    const char* title;
    std::vector<std::optional<double>> ReportRow::*field;
    bool higher;
    const char* spec;
  };
  const std::vector<Section> sections{{"Mean ACC", &ReportRow::mean_acc, true, "%.4f"},
                                      {"Scan-rescan ACC", &ReportRow::scan_rescan_acc, true, "%.4f"},
                                      {"VF MSE", &ReportRow::vf_mse, false, "%.3e"}};
  os << "# " << r.kind << "\n";
  for (const auto& s : sections) {
    bool any = false;
    for (const auto& row : r.rows)
      for (const auto& v : row.*s.field) any = any || v.has_value();
    if (!any) continue;
    os << "\n## " << s.title << "\n\n| model |";
    for (const auto& c : r.columns) os << ' ' << c << " |";
    os << " average |\n|---|";
    for (size_t c = 0; c <= r.columns.size(); ++c) os << "---|";
    os << '\n';
    std::vector<std::vector<int>> marks;
    for (size_t c = 0; c < r.columns.size(); ++c) marks.push_back(rank_marks(detail::column_of(r, s.field, c), s.higher));
    for (size_t i = 0; i < r.rows.size(); ++i) {
      const auto& row = r.rows[i];
      os << "| " << row.model << " |";
      for (size_t c = 0; c < r.columns.size(); ++c) {
        const auto& v = (row.*s.field)[c];
        if (!v) {
          os << " - |";
          continue;
        }
        const std::string txt = detail::fmt(*v, s.spec);
        os << ' ' << (marks[c][i] == 1 ? "**" + txt + "**" : marks[c][i] == 2 ? "_" + txt + "_" : txt) << " |";
      }
      const auto avg = row_average(row.*s.field);
      os << ' ' << (avg ? detail::fmt(*avg, s.spec) : std::string("-")) << " |\n";
    }
  }
  if (!r.tests.empty()) {
    os << "\n## Wilcoxon signed-rank\n\n| metric | config | model A | model B | statistic | p | n | exact |\n"
       << "|---|---|---|---|---|---|---|---|\n";
    for (const auto& t : r.tests)
      os << "| " << t.metric << " | " << t.config << " | " << t.model_a << " | " << t.model_b << " | "
         << detail::fmt(t.statistic, "%.1f") << " | " << detail::fmt(t.p_value, "%.3e") << " | " << t.n << " | "
         << (t.exact ? "yes" : "no") << " |\n";
  }
  os << "\nBold marks the best and underscore the second best entry per column; ties go to the earlier row.\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Prediction files

inline constexpr int kPredictionsVersion = 1;

/// Finalized [n x 48] outputs of one model (or the oracle) under one configuration.
struct Predictions {
  std::string source;
  std::string config;
  Eigen::MatrixXd values;
};

inline void save_predictions(const Predictions& p, const std::filesystem::path& path) {
  detail::require(p.values.cols() == kTargetWidth, "predictions must have 48 columns");
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < p.values.rows(); ++r) {
    std::vector<double> row(static_cast<size_t>(kTargetWidth));
    for (int c = 0; c < kTargetWidth; ++c) row[size_t(c)] = p.values(r, c);
    rows.push_back(std::move(row));
  }
  const nlohmann::json j{{"format", "msfodf-predictions"}, {"version", kPredictionsVersion}, {"source", p.source},
                         {"config", p.config},           {"n_voxels", p.values.rows()}, {"values", rows}};
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << j.dump() << '\n';
}

inline Predictions load_predictions(const std::filesystem::path& path) {
  const auto j = detail::read_json_file(path);
  Predictions p;
  try {
    detail::require(j.at("format") == "msfodf-predictions", path.string() + " is not a predictions file");
    detail::require(j.at("version").get<int>() == kPredictionsVersion, "unsupported predictions version");
    p.source = j.at("source").get<std::string>();
    p.config = j.at("config").get<std::string>();
    const auto& rows = j.at("values");
    detail::require(rows.size() == j.at("n_voxels").get<size_t>(), "predictions n_voxels does not match rows");
    p.values.resize(Eigen::Index(rows.size()), kTargetWidth);
    for (size_t r = 0; r < rows.size(); ++r) {
      const auto v = rows[r].get<std::vector<double>>();
      detail::require(v.size() == size_t(kTargetWidth), "prediction row must have 48 entries");
      for (int c = 0; c < kTargetWidth; ++c) p.values(Eigen::Index(r), c) = v[size_t(c)];
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("corrupt predictions file " + path.string() + ": " + e.what());
  }
  return p;
}

// ---------------------------------------------------------------------------
// Benchmark runs

struct BenchModel {
  std::string name;
  std::filesystem::path checkpoint;
};

struct BenchConfig {
  std::filesystem::path dataset;  // evaluation scan
  std::filesystem::path rescan;   // noise twin of `dataset`, table 2 only
  std::vector<BenchModel> models;
  double wm_threshold = kWmThreshold;
};

inline BenchConfig bench_config_from_json(const nlohmann::json& j, const std::filesystem::path& base = {}) {
  BenchConfig c;
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
  };
  try {
    c.dataset = resolve(j.at("dataset").get<std::string>());
    if (j.contains("rescan")) c.rescan = resolve(j.at("rescan").get<std::string>());
    for (const auto& m : j.at("models"))
      c.models.push_back({m.at("name").get<std::string>(), resolve(m.at("checkpoint").get<std::string>())});
    c.wm_threshold = j.value("wm_threshold", kWmThreshold);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed bench config: ") + e.what());
  }
  detail::require(!c.models.empty(), "bench config declares no models");
  for (size_t i = 0; i < c.models.size(); ++i)
    for (size_t k = 0; k < i; ++k)
      detail::require(c.models[i].name != c.models[k].name, "duplicate model name " + c.models[i].name);
  return c;
}

struct LoadedModel {
  std::string name;
  std::string checkpoint;
  EstimatorParams params;
};

inline std::vector<LoadedModel> load_models(const BenchConfig& c) {
  std::vector<LoadedModel> out;
  for (const auto& m : c.models) {
    if (!std::filesystem::exists(m.checkpoint)) throw MissingArtifactError("missing checkpoint " + m.checkpoint.string());
    out.push_back({m.name, m.checkpoint.filename().string(), load_checkpoint(m.checkpoint)});
  }
  return out;
}

namespace detail {

inline nlohmann::json dataset_provenance(const VoxelDataset& ds) {
  return {{"seed", ds.seed},
          {"n_voxels", ds.n_voxels()},
          {"snr", ds.snr ? nlohmann::json(*ds.snr) : nlohmann::json(nullptr)},
          {"generator_version", ds.generator_version}};
}

inline TissueParams dataset_tissue(const VoxelDataset& ds) {
  if (ds.metadata.contains("phantom")) return phantom_config_from_json(ds.metadata.at("phantom")).tissue;
  return {};
}

}  // namespace detail

/// ACC of every model under every shell configuration on one dataset.
inline EvalReport run_table1(const std::vector<LoadedModel>& models, const VoxelDataset& ds,
                             double wm_threshold = kWmThreshold) {
  ds.validate();
  detail::require(!models.empty(), "no models to evaluate");
  const int k = ds.table.num_shells();
  EvalReport r;
  r.kind = "table1";
  for (const auto& m : enumerate_configs(k)) r.columns.push_back(m.str());
  const Eigen::MatrixXd targets = ds.targets.cast<double>();
  nlohmann::json ckpts = nlohmann::json::object();
  for (const auto& m : models) {
    detail::require(m.params.num_shells == k, "model " + m.name + " expects a different shell count");
    const FeatureBuilder fb(ds.table, m.params.shore_md);
    ReportRow row;
    row.model = m.name;
    row.checkpoint = m.checkpoint;
    for (const auto& mask : enumerate_configs(k)) {
      const Eigen::MatrixXd pred = predict_dataset(m.params, fb, ds.signals, mask);
      const AccResult a = eval_acc(pred, targets, wm_threshold);
      row.mean_acc.push_back(a.mean);
      row.vf_mse.push_back(eval_vf_mse(pred, targets));
      row.scan_rescan_acc.push_back(std::nullopt);
      row.n_voxels.push_back(Eigen::Index(a.voxels.size()));
    }
    ckpts[m.name] = m.checkpoint;
    r.rows.push_back(std::move(row));
  }
  r.provenance = {{"dataset", detail::dataset_provenance(ds)}, {"checkpoints", ckpts}, {"wm_threshold", wm_threshold}};
  r.validate();
  return r;
}

inline EvalReport run_table1(const BenchConfig& c) {
  const auto models = load_models(c);
  return run_table1(models, load_dataset(c.dataset), c.wm_threshold);
}

inline constexpr const char* kSingleRow = "single";

/// Per-configuration single models (each column uses the model trained on it),
/// the dh-sc model, and the MSMT-CSD oracle on a scan/rescan pair.
inline EvalReport run_table2(const std::vector<LoadedModel>& models, const VoxelDataset& scan,
                             const VoxelDataset& rescan, double wm_threshold = kWmThreshold) {
  scan.validate();
  rescan.validate();
  check_twins(scan, rescan);
  const int k = scan.table.num_shells();
  const auto configs = enumerate_configs(k);
  const Eigen::MatrixXd targets = scan.targets.cast<double>();

  std::map<std::string, const LoadedModel*> single;
  const LoadedModel* dhsc = nullptr;
  for (const auto& m : models) {
    if (m.params.variant == Variant::kFcnSingle && m.params.train_mask) {
      const std::string key = m.params.train_mask->str();
      detail::require(!single.count(key), "two single models trained on " + key);
      single[key] = &m;
    } else if (m.params.variant == Variant::kDhSc) {
      detail::require(dhsc == nullptr, "more than one dh-sc model declared");
      dhsc = &m;
    }
  }
  detail::require(dhsc != nullptr, "table 2 needs a dh-sc model");
  for (const auto& mask : configs)
    detail::require(single.count(mask.str()), "no single model trained on configuration " + mask.str());

  EvalReport r;
  r.kind = "table2";
  for (const auto& m : configs) r.columns.push_back(m.str());
  ReportRow rs{kSingleRow, "", {}, {}, {}, {}}, rd{dhsc->name, dhsc->checkpoint, {}, {}, {}, {}},
      ro{kOracleName, "", {}, {}, {}, {}};
  const ResponseFunctions resp = estimate_responses(detail::dataset_tissue(scan), scan.table);
  nlohmann::json ckpts = nlohmann::json::object();
  ckpts[dhsc->name] = dhsc->checkpoint;

  auto evaluate = [&](ReportRow& row, const Eigen::MatrixXd& pa, const Eigen::MatrixXd& pb) {
    const AccResult a = eval_acc(pa, targets, wm_threshold);
    const AccResult sr = scan_rescan_consistency(pa, pb, targets, wm_threshold);
    row.mean_acc.push_back(a.mean);
    row.vf_mse.push_back(eval_vf_mse(pa, targets));
    row.scan_rescan_acc.push_back(sr.mean);
    row.n_voxels.push_back(Eigen::Index(a.voxels.size()));
    return std::pair{a, sr};
  };
  auto add_tests = [&](const std::string& cfg, const std::vector<std::pair<std::string, std::pair<AccResult, AccResult>>>& res) {
    for (size_t i = 0; i < res.size(); ++i)
      for (size_t j = i + 1; j < res.size(); ++j) {
        const std::pair<const char*, int> metrics[] = {{"acc", 0}, {"scan_rescan_acc", 1}};
        for (const auto& [metric, which] : metrics) {
          const auto& a = which == 0 ? res[i].second.first : res[i].second.second;
          const auto& b = which == 0 ? res[j].second.first : res[j].second.second;
          try {
            const WilcoxonResult w = wilcoxon_signed_rank(a.per_voxel, b.per_voxel);
            r.tests.push_back({metric, cfg, res[i].first, res[j].first, w.statistic, w.p_value, w.n, w.exact});
          } catch (const ValidationError&) {
            r.tests.push_back({metric, cfg, res[i].first, res[j].first, 0.0, 1.0, 0, true});
          }
        }
      }
  };

  for (const auto& mask : configs) {
    const std::string cfg = mask.str();
    const LoadedModel& sm = *single.at(cfg);
    const FeatureBuilder fs(scan.table, sm.params.shore_md), fd(scan.table, dhsc->params.shore_md);
    ckpts[sm.name] = sm.checkpoint;
    std::vector<std::pair<std::string, std::pair<AccResult, AccResult>>> res;
    res.emplace_back(kSingleRow, evaluate(rs, predict_dataset(sm.params, fs, scan.signals, mask),
                                          predict_dataset(sm.params, fs, rescan.signals, mask)));
    res.emplace_back(dhsc->name, evaluate(rd, predict_dataset(dhsc->params, fd, scan.signals, mask),
                                          predict_dataset(dhsc->params, fd, rescan.signals, mask)));
    res.emplace_back(kOracleName, evaluate(ro, oracle_predict(scan.signals, scan.table, resp, mask),
                                           oracle_predict(rescan.signals, scan.table, resp, mask)));
    add_tests(cfg, res);
  }
  r.rows = {rs, rd, ro};
  r.provenance = {{"dataset", detail::dataset_provenance(scan)},
                  {"rescan", detail::dataset_provenance(rescan)},
                  {"checkpoints", ckpts},
                  {"wm_threshold", wm_threshold}};
  r.validate();
  return r;
}

inline EvalReport run_table2(const BenchConfig& c) {
  if (c.rescan.empty()) throw MissingArtifactError("missing twin dataset: bench config has no rescan entry");
  if (!std::filesystem::exists(c.rescan)) throw MissingArtifactError("missing twin dataset " + c.rescan.string());
  const auto models = load_models(c);
  return run_table2(models, load_dataset(c.dataset), load_dataset(c.rescan), c.wm_threshold);
}

}  // namespace msfodf
