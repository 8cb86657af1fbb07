#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "msfodf/msfodf.hpp"

namespace fs = std::filesystem;
using namespace msfodf;

namespace {

const std::string kCli = MSFODF_CLI_PATH;

int run(const std::string& args) {
  const std::string cmd = kCli + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("msfodf_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST(Cli, ExitCodes) {
  const fs::path d = scratch("exit");
  EXPECT_EQ(run("phantom gen --n-voxels 5 --out " + q(d / "a.json")), 2);  // no --seed
  EXPECT_EQ(run("train --data " + q(d / "none.json") + " --variant dh-sc --seed 1 --out " + q(d / "m.ckpt")), 4);
  EXPECT_EQ(run("phantom gen --seed 1 --config " + q(d / "none.json") + " --out " + q(d / "a.json")), 4);
  ASSERT_EQ(run("phantom gen --seed 1 --n-voxels 40 --out " + q(d / "a.json")), 0);
  EXPECT_EQ(run("train --data " + q(d / "a.json") + " --variant bogus --seed 1 --out " + q(d / "m.ckpt")), 2);
  EXPECT_EQ(run("train --data " + q(d / "a.json") + " --variant fcn-single --seed 1 --out " + q(d / "m.ckpt")), 2);
  EXPECT_EQ(run("train --data " + q(d / "a.json") + " --variant dh-sc --lr 1e4 --epochs 3 --quiet --seed 1 --out " +
                q(d / "m.ckpt")),
            3);
  EXPECT_EQ(run("predict --model " + q(d / "none.ckpt") + " --data " + q(d / "a.json") + " --out " + q(d / "p.json")),
            4);
  EXPECT_EQ(run("fit sh --data " + q(d / "a.json") + " --mask 1x1 --out " + q(d / "s.json")), 2);
  EXPECT_EQ(run("nonsense"), 2);
}

TEST(Cli, PhantomGenIsByteReproducible) {
  const fs::path d = scratch("gen");
  for (const char* n : {"a", "b"})
    ASSERT_EQ(run("phantom gen --seed 11 --n-voxels 60 --snr 30 --out " + q(d / (std::string(n) + ".json")) +
                  " --rescan " + q(d / (std::string(n) + "_rs.json"))),
              0);
  ASSERT_EQ(run("phantom gen --seed 12 --n-voxels 60 --snr 30 --out " + q(d / "c.json")), 0);
  EXPECT_EQ(slurp(d / "a.json"), slurp(d / "b.json"));
  EXPECT_EQ(slurp(d / "a.bin"), slurp(d / "b.bin"));
  EXPECT_EQ(slurp(d / "a_rs.bin"), slurp(d / "b_rs.bin"));
  EXPECT_NE(slurp(d / "a.bin"), slurp(d / "a_rs.bin"));
  EXPECT_NE(slurp(d / "a.bin"), slurp(d / "c.bin"));

  const VoxelDataset a = load_dataset(d / "a.json"), rs = load_dataset(d / "a_rs.json");
  EXPECT_EQ(a.n_voxels(), 60);
  ASSERT_TRUE(a.snr.has_value());
  EXPECT_EQ(*a.snr, 30.0);
  EXPECT_EQ(a.targets, rs.targets);
}

TEST(Cli, ConfigFileAndFlagOverrides) {
  const fs::path d = scratch("config");
  std::ofstream(d / "ph.json") << R"({"n_voxels": 25, "snr": null, "n_fibers": {"min": 1, "max": 1},
                                     "scheme": {"per_shell": 60, "bvals": [1000, 2500]}})";
  ASSERT_EQ(run("phantom gen --seed 3 --config " + q(d / "ph.json") + " --out " + q(d / "a.json")), 0);
  VoxelDataset a = load_dataset(d / "a.json");
  EXPECT_EQ(a.n_voxels(), 25);
  EXPECT_FALSE(a.snr.has_value());
  EXPECT_EQ(a.table.num_shells(), 2);
  EXPECT_EQ(a.table.size(), 6 + 2 * 60);

  ASSERT_EQ(run("phantom gen --seed 3 --config " + q(d / "ph.json") + " --n-voxels 9 --snr 20 --out " +
                q(d / "b.json")),
            0);
  a = load_dataset(d / "b.json");
  EXPECT_EQ(a.n_voxels(), 9);
  EXPECT_EQ(a.snr.value_or(0.0), 20.0);
}

TEST(Cli, FslAcquisitionRoundTrip) {
  const fs::path d = scratch("fsl");
  ASSERT_EQ(run("phantom gen --seed 5 --n-voxels 20 --out " + q(d / "a.json") + " --fsl-prefix " + q(d / "acq")), 0);
  ASSERT_EQ(run("phantom gen --seed 5 --n-voxels 20 --out " + q(d / "b.json") + " --bval " + q(d / "acq.bval") +
                " --bvec " + q(d / "acq.bvec")),
            0);
  EXPECT_EQ(slurp(d / "a.bin"), slurp(d / "b.bin"));
  EXPECT_EQ(run("phantom gen --seed 5 --n-voxels 20 --out " + q(d / "c.json") + " --bval " + q(d / "acq.bval")), 2);
}

TEST(Cli, ClassicalFits) {
  const fs::path d = scratch("fits");
  ASSERT_EQ(run("phantom gen --seed 9 --n-voxels 30 --noiseless --out " + q(d / "a.json")), 0);
  ASSERT_EQ(run("fit sh --data " + q(d / "a.json") + " --mask 011 --out " + q(d / "sh.json")), 0);
  const auto sh = detail::read_json_file(d / "sh.json");
  EXPECT_EQ(sh.at("mask"), "011");
  ASSERT_EQ(sh.at("voxels").size(), 30u);
  ASSERT_EQ(sh.at("voxels")[0].size(), 2u);
  EXPECT_EQ(sh_from_json(sh.at("voxels")[0][1]).coeffs.size(), 45);

  ASSERT_EQ(run("fit shore --data " + q(d / "a.json") + " --out " + q(d / "shore.json")), 0);
  const auto shore = detail::read_json_file(d / "shore.json");
  const ShoreCoefficients c = shore_from_json(shore.at("voxels")[0]);
  EXPECT_EQ(c.coeffs.size(), 50);
  EXPECT_NEAR(c.scale.zeta, 714.2857142857, 1e-6);

  ASSERT_EQ(run("csd fit --data " + q(d / "a.json") + " --out " + q(d / "csd.json") + " --responses-out " +
                q(d / "resp.json")),
            0);
  ASSERT_EQ(run("csd fit --data " + q(d / "a.json") + " --responses " + q(d / "resp.json") + " --out " +
                q(d / "csd2.json")),
            0);
  EXPECT_EQ(slurp(d / "csd.json"), slurp(d / "csd2.json"));
  ASSERT_EQ(run("eval --pred " + q(d / "csd.json") + " --data " + q(d / "a.json") + " --out " + q(d / "e.json") +
                " --csv " + q(d / "e.csv")),
            0);
  const std::string csv = slurp(d / "e.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "model,config,mean_acc,vf_mse,scan_rescan_acc,n_voxels");
  const EvalReport r = report_from_json(detail::read_json_file(d / "e.json"));
  EXPECT_GT(*r.rows.at(0).mean_acc.at(0), 0.9);
}

TEST(Cli, TrainPredictAndBenchAreByteReproducible) {
  const fs::path d = scratch("bench");
  ASSERT_EQ(run("phantom gen --seed 21 --n-voxels 120 --out " + q(d / "train.json")), 0);
  ASSERT_EQ(run("phantom gen --seed 22 --n-voxels 60 --out " + q(d / "eval.json") + " --rescan " +
                q(d / "rescan.json")),
            0);
  const std::string common = " --data " + q(d / "train.json") + " --epochs 2 --batch-size 32 --quiet --deterministic";
  std::string models = "[";
  for (const auto& m : enumerate_configs(3)) {
    ASSERT_EQ(run("train --variant fcn-single --mask " + m.str() + " --seed 1" + common + " --out " +
                  q(d / ("single_" + m.str() + ".ckpt"))),
              0);
    models += R"({"name": "single-)" + m.str() + R"(", "checkpoint": "single_)" + m.str() + R"(.ckpt"},)";
  }
  for (const char* run_name : {"dhsc_a", "dhsc_b"})
    ASSERT_EQ(run(std::string("train --variant dh-sc --seed 4") + common + " --out " +
                  q(d / (std::string(run_name) + ".ckpt"))),
              0);
  EXPECT_EQ(slurp(d / "dhsc_a.ckpt"), slurp(d / "dhsc_b.ckpt"));
  EXPECT_EQ(slurp(d / "dhsc_a.loss.csv"), slurp(d / "dhsc_b.loss.csv"));
  models += R"({"name": "dh-sc", "checkpoint": "dhsc_a.ckpt"}])";

  std::ofstream(d / "bench.json") << R"({"dataset": "eval.json", "rescan": "rescan.json", "models": )" << models
                                  << "}";
  std::ofstream(d / "bench_norescan.json") << R"({"dataset": "eval.json", "models": )" << models << "}";
  for (const char* out : {"r1", "r2"}) {
    ASSERT_EQ(run("bench table1 --deterministic --config " + q(d / "bench.json") + " --out-dir " + q(d / out)), 0);
    ASSERT_EQ(run("bench table2 --deterministic --config " + q(d / "bench.json") + " --out-dir " + q(d / out)), 0);
  }
  for (const char* f : {"table1.json", "table1.csv", "table1.md", "table2.json", "table2.csv", "table2.md"}) {
    EXPECT_FALSE(slurp(d / "r1" / f).empty()) << f;
    EXPECT_EQ(slurp(d / "r1" / f), slurp(d / "r2" / f)) << f;
  }
  const EvalReport t1 = report_from_json(detail::read_json_file(d / "r1" / "table1.json"));
  EXPECT_EQ(t1.rows.size(), 8u);
  EXPECT_EQ(t1.columns.size(), 7u);
  const EvalReport t2 = report_from_json(detail::read_json_file(d / "r1" / "table2.json"));
  EXPECT_EQ(t2.rows.size(), 3u);

  EXPECT_EQ(run("bench table2 --config " + q(d / "bench_norescan.json") + " --out-dir " + q(d / "r3")), 4);
  fs::remove(d / "single_010.ckpt");
  EXPECT_EQ(run("bench table1 --config " + q(d / "bench.json") + " --out-dir " + q(d / "r3")), 4);

  ASSERT_EQ(run("predict --model " + q(d / "dhsc_a.ckpt") + " --data " + q(d / "eval.json") + " --mask 100 --out " +
                q(d / "p.json")),
            0);
  const Predictions p = load_predictions(d / "p.json");
  EXPECT_EQ(p.config, "100");
  EXPECT_EQ(p.values.rows(), 60);
  const FeatureBuilder fb(load_dataset(d / "eval.json").table);
  const Eigen::MatrixXd direct =
      predict_dataset(load_checkpoint(d / "dhsc_a.ckpt"), fb, load_dataset(d / "eval.json").signals,
                      ShellMask::parse("100"));
  EXPECT_EQ(p.values, direct);
}
