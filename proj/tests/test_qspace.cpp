#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "msfodf/phantom.hpp"
#include "msfodf/qspace.hpp"

namespace msfodf {
namespace {

struct TextScheme {
  std::string bval, bvec;
};

TextScheme hcp_like_text() {
  const auto t = make_scheme(90, kDefaultNominalBvalues, 0);
  const auto [bval, bvec] = format_bval_bvec(t);
  return {bval, bvec};
}

TEST(ParseBvalBvec, ThreeShellsOfNinety) {
  const auto s = hcp_like_text();
  const auto t = parse_bval_bvec(s.bval, s.bvec, 100.0);
  EXPECT_EQ(t.size(), 270);
  ASSERT_EQ(t.num_shells(), 3);
  for (int k = 0; k < 3; ++k) EXPECT_EQ(t.shell_indices(k).size(), 90u);
  EXPECT_EQ(t.nominal_bvalues(), kDefaultNominalBvalues);
}

TEST(ParseBvalBvec, SingleB0WithZeroDirection) {
  const auto t = parse_bval_bvec("0\n", "0\n0\n0\n", 100.0);
  EXPECT_EQ(t.size(), 1);
  EXPECT_EQ(t.num_shells(), 0);
  EXPECT_TRUE(t.is_b0(0));
  EXPECT_EQ(t.b0_indices().size(), 1u);
}

TEST(ParseBvalBvec, ClustersJitteredBvalues) {
  const auto t = parse_bval_bvec("995 1005", "1 0\n0 1\n0 0", 50.0);
  ASSERT_EQ(t.num_shells(), 1);
  EXPECT_EQ(t.nominal_bvalues()[0], 1000.0);
  EXPECT_EQ(t.shell_ids(), (std::vector<int>{0, 0}));
}

TEST(ParseBvalBvec, NormalizesDirections) {
  const auto t = parse_bval_bvec("1000", "3\n0\n4", 100.0);
  EXPECT_NEAR(t.directions()(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(t.directions()(0, 2), 0.8, 1e-15);
}

TEST(ParseBvalBvec, Errors) {
  EXPECT_THROW(parse_bval_bvec("1000 2000", "1 0\n0 1", 100.0), ValidationError);
  EXPECT_THROW(parse_bval_bvec("1000 2000", "1 0 0\n0 1 0\n0 0 1", 100.0), ValidationError);
  EXPECT_THROW(parse_bval_bvec("1000 abc", "1 0\n0 1\n0 0", 100.0), ValidationError);
  EXPECT_THROW(parse_bval_bvec("1000", "0\n0\n0", 100.0), ValidationError);
  EXPECT_THROW(parse_bval_bvec("1500", "1\n0\n0", 100.0), ValidationError);
}

TEST(ParseBvalBvec, RoundTripPreservesDirections) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_int_distribution<int> shell(0, 2);
  Directions d(40, 3);
  Eigen::VectorXd b(40);
  for (int i = 0; i < 40; ++i) {
    d.row(i) << g(rng), g(rng), g(rng);
    b[i] = kDefaultNominalBvalues[shell(rng)] + 20.0 * g(rng);
  }
  const auto t = GradientTable::from_measurements(d, b);
  const auto [bval, bvec] = format_bval_bvec(t);
  const auto back = parse_bval_bvec(bval, bvec);
  EXPECT_LE((back.directions() - t.directions()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(back.bvalues(), t.bvalues());
  EXPECT_EQ(back.shell_ids(), t.shell_ids());
}

TEST(EnumerateConfigs, CountsAndOrder) {
  const auto c3 = enumerate_configs(3);
  ASSERT_EQ(c3.size(), 7u);
  std::vector<std::string> names;
  for (const auto& m : c3) names.push_back(m.str());
  EXPECT_EQ(names, (std::vector<std::string>{"001", "010", "011", "100", "101", "110", "111"}));
  ASSERT_EQ(enumerate_configs(1).size(), 1u);
  EXPECT_EQ(enumerate_configs(1)[0].str(), "1");
  EXPECT_EQ(enumerate_configs(4).size(), 15u);
  EXPECT_THROW(enumerate_configs(0), ValidationError);
  for (int k = 1; k <= 6; ++k) {
    const auto c = enumerate_configs(k);
    std::set<std::string> distinct;
    for (const auto& m : c) {
      EXPECT_TRUE(m.any());
      distinct.insert(m.str());
    }
    EXPECT_EQ(c.size(), (1u << k) - 1);
    EXPECT_EQ(distinct.size(), c.size());
  }
}

TEST(ShellMask, ParseAndValidate) {
  const auto m = ShellMask::parse("110");
  EXPECT_TRUE(m[0]);
  EXPECT_TRUE(m[1]);
  EXPECT_FALSE(m[2]);
  EXPECT_EQ(m.count(), 2);
  EXPECT_THROW(ShellMask::parse("1x0"), ValidationError);
}

class MaskTest : public ::testing::Test {
 protected:
  std::shared_ptr<const GradientTable> table = std::make_shared<GradientTable>(make_scheme(90, kDefaultNominalBvalues, 0));
  Eigen::VectorXd random_signal(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.1, 1.0);
    Eigen::VectorXd s(table->size());
    for (auto& v : s) v = u(rng);
    return s;
  }
};

TEST_F(MaskTest, IdentityMask) {
  const auto s = random_signal(1);
  EXPECT_EQ(apply_shell_mask(s, table, ShellMask::parse("111")).values, s);
}

TEST_F(MaskTest, SingleShellZeroesOthers) {
  const auto s = random_signal(2);
  const auto m = apply_shell_mask(s, table, ShellMask::parse("100"));
  EXPECT_EQ((m.values.array() == 0.0).count(), 180);
  for (int i : table->shell_indices(0)) EXPECT_EQ(m.values[i], s[i]);
  const auto ones = apply_shell_mask(Eigen::VectorXd::Ones(270), table, ShellMask::parse("010"));
  EXPECT_EQ(ones.values.sum(), 90.0);
}

TEST_F(MaskTest, KeepsB0AndRejectsBadMasks) {
  auto t = std::make_shared<GradientTable>(make_scheme(90));
  const Eigen::VectorXd s = Eigen::VectorXd::Ones(t->size());
  const auto m = apply_shell_mask(s, t, ShellMask::parse("001"));
  for (int i : t->b0_indices()) EXPECT_EQ(m.values[i], 1.0);
  EXPECT_THROW(apply_shell_mask(s, t, ShellMask::parse("000")), ValidationError);
  EXPECT_THROW(apply_shell_mask(s, t, ShellMask::parse("01")), ValidationError);
  EXPECT_THROW(apply_shell_mask(Eigen::VectorXd::Ones(5), t, ShellMask::parse("111")), ValidationError);
}

TEST_F(MaskTest, IdempotentAndAdditiveOverDisjointMasks) {
  const auto s = random_signal(3);
  for (const auto& m : enumerate_configs(3)) {
    const auto once = mask_values(s, *table, m);
    EXPECT_EQ(mask_values(once, *table, m), once);
  }
  const auto a = mask_values(s, *table, ShellMask::parse("100"));
  const auto b = mask_values(s, *table, ShellMask::parse("011"));
  EXPECT_EQ(mask_values(s, *table, ShellMask::parse("111")), a + b);
}

TEST(NormalizeByB0, DividesByMeanB0) {
  const auto t = make_scheme(30);
  Eigen::VectorXd s = Eigen::VectorXd::Constant(t.size(), 0.5);
  for (int i : t.b0_indices()) s[i] = 2.0;
  const auto n = normalize_by_b0(s, t);
  EXPECT_DOUBLE_EQ(n[t.b0_indices()[0]], 1.0);
  EXPECT_DOUBLE_EQ(n[t.shell_indices(0)[0]], 0.25);
}

class DatasetIo : public ::testing::Test {
 protected:
  std::filesystem::path dir = std::filesystem::temp_directory_path() /
                              ("msfodf_qspace_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                               "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
  void SetUp() override { std::filesystem::create_directories(dir); }
  void TearDown() override { std::filesystem::remove_all(dir); }

  VoxelDataset ten_voxels() {
    PhantomConfig cfg;
    return gen_dataset(10, make_scheme(30), cfg, 42).scan;
  }
};

TEST_F(DatasetIo, RoundTripIsBitExact) {
  const auto ds = ten_voxels();
  save_dataset(ds, dir / "ds.json");
  const auto back = load_dataset(dir / "ds.json");
  ASSERT_EQ(back.signals.rows(), 10);
  EXPECT_EQ(std::memcmp(back.signals.data(), ds.signals.data(), sizeof(float) * ds.signals.size()), 0);
  EXPECT_EQ(std::memcmp(back.targets.data(), ds.targets.data(), sizeof(float) * ds.targets.size()), 0);
  EXPECT_EQ(back.seed, 42u);
  EXPECT_EQ(back.snr, ds.snr);
  EXPECT_EQ(back.table.bvalues(), ds.table.bvalues());
  EXPECT_LE((back.table.directions() - ds.table.directions()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST_F(DatasetIo, TruncatedPayloadIsDimensionMismatch) {
  const auto ds = ten_voxels();
  save_dataset(ds, dir / "ds.json");
  const auto bin = payload_path(dir / "ds.json");
  std::filesystem::resize_file(bin, std::filesystem::file_size(bin) - 7);
  try {
    load_dataset(dir / "ds.json");
    FAIL() << "expected an error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("dimension mismatch"), std::string::npos);
  }
}

TEST_F(DatasetIo, ErrorNamesBothVoxelCounts) {
  auto ds = ten_voxels();
  save_dataset(ds, dir / "ds.json");
  VoxelDataset nine = ds;
  nine.signals = ds.signals.topRows(9);
  nine.targets = ds.targets.topRows(9);
  save_dataset(nine, dir / "nine.json");
  std::filesystem::copy_file(payload_path(dir / "nine.json"), payload_path(dir / "ds.json"),
                             std::filesystem::copy_options::overwrite_existing);
  try {
    load_dataset(dir / "ds.json");
    FAIL() << "expected an error";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("10"), std::string::npos) << msg;
    EXPECT_NE(msg.find("9"), std::string::npos) << msg;
  }
}

TEST_F(DatasetIo, CorruptHeader) {
  const auto ds = ten_voxels();
  save_dataset(ds, dir / "ds.json");
  std::ofstream(dir / "ds.json") << "{ not json";
  EXPECT_THROW(load_dataset(dir / "ds.json"), ValidationError);
  EXPECT_THROW(load_dataset(dir / "missing.json"), MissingArtifactError);
}

}  // namespace
}  // namespace msfodf
