#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "msfodf/bench.hpp"

using namespace msfodf;
namespace fs = std::filesystem;

namespace {

Eigen::MatrixXd wm_targets(int n, double wm = 0.8) {
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(n, 48);
  for (int i = 0; i < n; ++i) {
    t(i, 0) = 0.28;
    t(i, 1) = 1.0;
    t.row(i).tail(3) << wm, 1.0 - wm, 0.0;
  }
  return t;
}

// Two-sided p-value by enumerating all 2^n sign patterns over O(n^2) average ranks.
double brute_force_p(const std::vector<double>& d) {
  const size_t n = d.size();
  std::vector<double> rank(n);
  for (size_t i = 0; i < n; ++i) {
    double less = 0, equal = 0;
    for (size_t j = 0; j < n; ++j) {
      if (std::abs(d[j]) < std::abs(d[i])) ++less;
      if (j != i && std::abs(d[j]) == std::abs(d[i])) ++equal;
    }
    rank[i] = 1 + less + equal / 2;
  }
  double obs = 0;
  for (size_t i = 0; i < n; ++i)
    if (d[i] > 0) obs += rank[i];
  double lo = 0, hi = 0;
  const std::uint64_t patterns = 1ull << n;
  for (std::uint64_t s = 0; s < patterns; ++s) {
    double w = 0;
    for (size_t i = 0; i < n; ++i)
      if (s >> i & 1) w += rank[i];
    if (w <= obs + 1e-9) ++lo;
    if (w >= obs - 1e-9) ++hi;
  }
  return std::min(1.0, 2 * std::min(lo, hi) / double(patterns));
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("msfodf_bench_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

struct SmallBench {
  fs::path dir;
  BenchConfig cfg;
};

// Untrained models and a small twin phantom written to disk.
SmallBench write_small_bench(const std::string& name, int n_voxels = 40) {
  SmallBench b;
  b.dir = temp_dir(name);
  const GradientTable table = make_scheme();
  PhantomConfig pc;
  const PhantomData d = gen_dataset(n_voxels, table, pc, 21, true);
  save_dataset(d.scan, b.dir / "scan.json");
  save_dataset(*d.rescan, b.dir / "rescan.json");
  b.cfg.dataset = b.dir / "scan.json";
  b.cfg.rescan = b.dir / "rescan.json";
  for (const auto& m : enumerate_configs(3)) {
    const fs::path f = b.dir / ("M_" + m.str() + ".ckpt");
    save_checkpoint(init_params(Variant::kFcnSingle, 3, 1, m), f);
    b.cfg.models.push_back({"M_" + m.str(), f});
  }
  for (Variant v : {Variant::kFcnAll, Variant::kDhShore, Variant::kDhSh, Variant::kDhSc}) {
    const fs::path f = b.dir / (variant_name(v) + ".ckpt");
    save_checkpoint(init_params(v, 3, 2), f);
    b.cfg.models.push_back({variant_name(v), f});
  }
  return b;
}

}  // namespace

TEST(EvalAcc, IdenticalPredictionsScoreOne) {
  const Eigen::MatrixXd t = wm_targets(5);
  const AccResult r = eval_acc(t, t);
  EXPECT_NEAR(r.mean, 1.0, 1e-12);
  EXPECT_EQ(r.voxels.size(), 5u);
}

TEST(EvalAcc, ThreeVoxelMean) {
  Eigen::MatrixXd t = wm_targets(3), p = t;
  p(1, 2) = 1.0;   // 45 degrees away from the target
  p(2, 1) = 0.0;   // orthogonal
  p(2, 3) = 1.0;
  const AccResult r = eval_acc(p, t);
  EXPECT_NEAR(r.per_voxel[0], 1.0, 1e-12);
  EXPECT_NEAR(r.per_voxel[1], 0.70710678, 1e-8);
  EXPECT_NEAR(r.per_voxel[2], 0.0, 1e-12);
  EXPECT_NEAR(r.mean, 0.56903559, 1e-8);
  EXPECT_LE(r.mean, r.per_voxel.maxCoeff());
}

TEST(EvalAcc, ExcludesNonWmVoxels) {
  Eigen::MatrixXd t = wm_targets(4);
  t.row(2).tail(3) << 0.5, 0.5, 0.0;  // not strictly above threshold
  Eigen::MatrixXd p = t;
  p.row(2).head(45) *= -1.0;
  const AccResult r = eval_acc(p, t);
  EXPECT_EQ(r.voxels, (std::vector<Eigen::Index>{0, 1, 3}));
  EXPECT_NEAR(r.mean, 1.0, 1e-12);
}

TEST(EvalAcc, AllGreyMatterIsAnError) {
  const Eigen::MatrixXd t = wm_targets(3, 0.2);
  try {
    eval_acc(t, t);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("no WM voxels"), std::string::npos);
  }
}

TEST(EvalAcc, IsotropicPredictionScoresZero) {
  const Eigen::MatrixXd t = wm_targets(2);
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(2, 48);
  p.col(0).setConstant(0.28);
  EXPECT_EQ(eval_acc(p, t).mean, 0.0);
}

TEST(EvalAcc, MisalignedCountsRejected) {
  EXPECT_THROW(eval_acc(wm_targets(2), wm_targets(3)), ValidationError);
}

TEST(EvalVf, Examples) {
  const Eigen::MatrixXd t = wm_targets(1, 0.6);
  EXPECT_EQ(eval_vf_mse(t, t), 0.0);
  Eigen::MatrixXd p = t;
  p.row(0).tail(3) += Eigen::RowVector3d(0.1, -0.1, 0.0);
  EXPECT_NEAR(eval_vf_mse(p, t), 0.02 / 3.0, 1e-15);
}

TEST(ScanRescan, IdenticalScansAreFullyConsistent) {
  const Eigen::MatrixXd t = wm_targets(3);
  Eigen::MatrixXd p = t;
  p(0, 5) = 0.3;
  EXPECT_NEAR(scan_rescan_consistency(p, p, t).mean, 1.0, 1e-12);
  EXPECT_THROW(scan_rescan_consistency(p, p.topRows(2), t), ValidationError);
}

TEST(ScanRescan, ModelOnTwins) {
  const GradientTable table = make_scheme();
  PhantomConfig pc;
  const PhantomData d = gen_dataset(30, table, pc, 3, true);
  const auto model = init_params(Variant::kDhSc, 3, 4);
  const AccResult same = scan_rescan_consistency(model, d.scan, d.scan, table, ShellMask::all(3));
  EXPECT_NEAR(same.mean, 1.0, 1e-12);
  const AccResult twins = scan_rescan_consistency(model, d.scan, *d.rescan, table, ShellMask::all(3));
  EXPECT_LE(twins.mean, 1.0);
  VoxelDataset other = *d.rescan;
  other.targets(0, 0) += 1.0f;
  EXPECT_THROW(scan_rescan_consistency(model, d.scan, other, table, ShellMask::all(3)), ValidationError);
}

TEST(Wilcoxon, AllPositiveDifferencesExact) {
  std::vector<double> a{1, 2, 3, 4, 5, 6, 7, 8}, b(8, 0.0);
  const WilcoxonResult w = wilcoxon_signed_rank(a, b);
  EXPECT_TRUE(w.exact);
  EXPECT_EQ(w.n, 8);
  EXPECT_DOUBLE_EQ(w.p_value, 2.0 / 256.0);
  EXPECT_EQ(w.statistic, 0.0);
  EXPECT_EQ(w.w_plus, 36.0);
}

TEST(Wilcoxon, SymmetricDifferencesAreNotSignificant) {
  std::vector<double> d{1, -1, 2, -2, 3, -3, 4, -4}, z(8, 0.0);
  EXPECT_GE(wilcoxon_signed_rank(d, z).p_value, 0.5);
}

TEST(Wilcoxon, Errors) {
  std::vector<double> a(10, 1.0);
  EXPECT_THROW(wilcoxon_signed_rank(a, a), ValidationError);
  std::vector<double> b(10, 1.0);
  for (int i = 0; i < 5; ++i) b[size_t(i)] = 0.0;
  EXPECT_THROW(wilcoxon_signed_rank(a, b), ValidationError);  // only 5 non-zero differences
  EXPECT_THROW(wilcoxon_signed_rank(a, std::vector<double>(9, 0.0)), ValidationError);
}

TEST(Wilcoxon, ExactMatchesBruteForceUpTo12) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g(0.2, 1.0);
  for (int n = 6; n <= 12; ++n) {
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> a(static_cast<size_t>(n)), b(static_cast<size_t>(n), 0.0);
      // Rounding creates ties on some trials.
      for (auto& x : a) x = trial % 2 ? std::round(2 * g(rng)) / 2 : g(rng);
      std::vector<double> d;
      for (double x : a)
        if (x != 0.0) d.push_back(x);
      if (d.size() < 6) continue;
      const WilcoxonResult w = wilcoxon_signed_rank(a, b, WilcoxonMode::kExact);
      EXPECT_NEAR(w.p_value, brute_force_p(d), 1e-12) << "n=" << n << " trial=" << trial;
      EXPECT_GT(w.p_value, 0.0);
      EXPECT_LE(w.p_value, 1.0);
    }
  }
}

TEST(Wilcoxon, NormalApproximationTracksExact) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(0.3, 1.0);
  std::vector<double> a(25), b(25, 0.0);
  for (auto& x : a) x = g(rng);
  const double exact = wilcoxon_signed_rank(a, b, WilcoxonMode::kExact).p_value;
  const WilcoxonResult approx = wilcoxon_signed_rank(a, b, WilcoxonMode::kNormal);
  EXPECT_FALSE(approx.exact);
  EXPECT_NEAR(approx.p_value, exact, 0.02);
  std::vector<double> big(200), zero(200, 0.0);
  for (auto& x : big) x = g(rng);
  const WilcoxonResult w = wilcoxon_signed_rank(big, zero);
  EXPECT_FALSE(w.exact);
  EXPECT_GT(w.p_value, 0.0);
  EXPECT_LE(w.p_value, 1.0);
}

TEST(Report, RankMarksBreakTiesTowardEarlierRow) {
  const std::vector<std::optional<double>> col{0.5, 0.9, std::nullopt, 0.9, 0.7};
  EXPECT_EQ(rank_marks(col, true), (std::vector<int>{0, 1, 0, 2, 0}));
  EXPECT_EQ(rank_marks(col, false), (std::vector<int>{1, 0, 0, 0, 2}));
}

TEST(Report, JsonCsvMarkdown) {
  EvalReport r;
  r.kind = "table1";
  r.columns = {"01", "10", "11"};
  r.rows.push_back({"a", "a.ckpt", {0.9, 0.8, 0.95}, {1e-3, 2e-3, 5e-4}, {std::nullopt, std::nullopt, std::nullopt}, {10, 10, 10}});
  r.rows.push_back({"b", "b.ckpt", {0.7, 0.85, 0.95}, {1e-3, 1e-3, 1e-3}, {0.9, 0.91, 0.92}, {10, 10, 10}});
  r.tests.push_back({"acc", "11", "a", "b", 12.0, 0.25, 10, true});
  r.provenance = {{"seed", 3}};
  EXPECT_EQ(report_from_json(nlohmann::json::parse(to_json(r).dump())), r);
  const std::string csv = format_metrics_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "model,config,mean_acc,vf_mse,scan_rescan_acc,n_voxels");
  EXPECT_NE(csv.find("\na,01,0.9,0.001,,10\n"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
  const std::string md = format_markdown(r);
  EXPECT_NE(md.find("**0.9000**"), std::string::npos);
  EXPECT_NE(md.find("_0.8000_"), std::string::npos);
  EXPECT_NE(md.find("ties go to the earlier row"), std::string::npos);
}

TEST(Report, InvariantsEnforced) {
  EvalReport r;
  r.columns = {"1"};
  r.rows.push_back({"a", "", {1.5}, {0.0}, {std::nullopt}, {1}});
  EXPECT_THROW(r.validate(), ValidationError);
  r.rows[0].mean_acc = {0.5};
  r.rows[0].vf_mse = {-1.0};
  EXPECT_THROW(r.validate(), ValidationError);
  r.rows[0].vf_mse = {0.0};
  r.tests.push_back({"acc", "1", "a", "a", 0.0, 0.0, 6, true});
  EXPECT_THROW(r.validate(), ValidationError);
}

TEST(BenchConfig, ParsesAndResolvesRelativePaths) {
  const auto c = bench_config_from_json(
      {{"dataset", "d.json"}, {"rescan", "/abs/r.json"}, {"models", {{{"name", "x"}, {"checkpoint", "x.ckpt"}}}}},
      "/base");
  EXPECT_EQ(c.dataset, fs::path("/base/d.json"));
  EXPECT_EQ(c.rescan, fs::path("/abs/r.json"));
  EXPECT_EQ(c.models.at(0).checkpoint, fs::path("/base/x.ckpt"));
  EXPECT_THROW(bench_config_from_json({{"dataset", "d"}, {"models", nlohmann::json::array()}}), ValidationError);
  EXPECT_THROW(bench_config_from_json({{"models", {{{"name", "x"}, {"checkpoint", "x"}}}}}), ValidationError);
}

TEST(Table1, StructureAndDeterminism) {
  const SmallBench b = write_small_bench("t1");
  const EvalReport r = run_table1(b.cfg);
  ASSERT_EQ(r.columns.size(), 7u);
  EXPECT_EQ(r.columns.front(), "001");
  EXPECT_EQ(r.columns.back(), "111");
  ASSERT_EQ(r.rows.size(), b.cfg.models.size());
  for (size_t i = 0; i < r.rows.size(); ++i) EXPECT_EQ(r.rows[i].model, b.cfg.models[i].name);
  EXPECT_EQ(format_metrics_csv(run_table1(b.cfg)), format_metrics_csv(r));
  EXPECT_EQ(report_from_json(to_json(r)), r);
  fs::remove_all(b.dir);
}

TEST(Table1, MissingCheckpoint) {
  const SmallBench b = write_small_bench("t1_missing", 10);
  BenchConfig c = b.cfg;
  c.models.push_back({"ghost", b.dir / "ghost.ckpt"});
  EXPECT_THROW(run_table1(c), MissingArtifactError);
  fs::remove_all(b.dir);
}

TEST(Table2, StructureAndContracts) {
  const SmallBench b = write_small_bench("t2");
  const EvalReport r = run_table2(b.cfg);
  ASSERT_EQ(r.rows.size(), 3u);
  int oracle = 0;
  for (const auto& row : r.rows) oracle += row.model == kOracleName;
  EXPECT_EQ(oracle, 1);
  EXPECT_EQ(r.rows[0].model, kSingleRow);
  EXPECT_EQ(r.rows[1].model, "dh-sc");
  EXPECT_EQ(r.tests.size(), 7u * 3u * 2u);
  for (const auto& t : r.tests) {
    EXPECT_GT(t.p_value, 0.0);
    EXPECT_LE(t.p_value, 1.0);
  }
  for (const auto& row : r.rows)
    for (size_t c = 0; c < 7; ++c) {
      ASSERT_TRUE(row.scan_rescan_acc[c].has_value());
      EXPECT_GE(*row.vf_mse[c], 0.0);
    }
  fs::remove_all(b.dir);
}

TEST(Table2, MissingTwinAndModels) {
  const SmallBench b = write_small_bench("t2_err", 10);
  BenchConfig c = b.cfg;
  c.rescan.clear();
  EXPECT_THROW(run_table2(c), MissingArtifactError);
  c.rescan = b.dir / "nope.json";
  EXPECT_THROW(run_table2(c), MissingArtifactError);
  c = b.cfg;
  c.models.erase(c.models.begin());  // drops the single model for 001
  EXPECT_THROW(run_table2(c), ValidationError);
  fs::remove_all(b.dir);
}
