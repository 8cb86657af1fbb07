#include <gtest/gtest.h>

#include <random>

#include "msfodf/deconv.hpp"
#include "msfodf/phantom.hpp"

namespace msfodf {
namespace {

GradientTable one_measurement(const Eigen::Vector3d& g, double b) {
  Directions d(1, 3);
  d.row(0) = g.transpose();
  return GradientTable::from_measurements(d, Eigen::VectorXd::Constant(1, b));
}

VoxelSpec single_fiber(const Eigen::Vector3d& u) {
  VoxelSpec s;
  s.fibers = {{u.normalized(), 1.0}};
  return s;
}

TEST(SimulateSignal, AnalyticCompartments) {
  VoxelSpec csf;
  csf.vf << 0, 0, 1;
  const auto t = make_scheme(30, {1000.0}, 0);
  EXPECT_LT((simulate_signal(csf, t).array() - 0.049787068).abs().maxCoeff(), 1e-8);

  EXPECT_NEAR(simulate_signal(single_fiber(Eigen::Vector3d::UnitZ()), one_measurement(Eigen::Vector3d::UnitZ(), 1000))[0],
              0.182684, 1e-6);
  EXPECT_NEAR(simulate_signal(single_fiber(Eigen::Vector3d::UnitZ()), one_measurement(Eigen::Vector3d::UnitX(), 2000))[0],
              0.670320, 1e-6);
}

TEST(SimulateSignal, RangeAndB0) {
  PhantomConfig cfg;
  const auto t = make_scheme();
  for (std::uint64_t v = 0; v < 50; ++v) {
    const auto spec = draw_voxel_spec(cfg, 9, v);
    const auto s = simulate_signal(spec, t, 2.5);
    EXPECT_GT(s.minCoeff(), 0.0);
    EXPECT_LE(s.maxCoeff(), 2.5);
    for (int i : t.b0_indices()) EXPECT_EQ(s[i], 2.5);
  }
}

TEST(GroundTruth, SingleFiberAlongZIsZonal) {
  const auto t = ground_truth_target(single_fiber(Eigen::Vector3d::UnitZ()));
  for (int l = 0; l <= 8; l += 2)
    for (int m = -l; m <= l; ++m)
      if (m != 0) {
        EXPECT_NEAR(t.wm_fodf(l, m), 0.0, 1e-14);
      }
  EXPECT_GT(t.wm_fodf(2, 0), 0.0);
  EXPECT_EQ(t.concat().size(), 48);
}

TEST(GroundTruth, ReflectionSymmetricCrossing) {
  VoxelSpec s;
  const double c = std::sqrt(0.5);
  s.fibers = {{Eigen::Vector3d(c, 0, c), 0.5}, {Eigen::Vector3d(-c, 0, c), 0.5}};
  const auto t = ground_truth_target(s);
  Eigen::Matrix3d reflect = Eigen::Matrix3d::Identity();
  reflect(0, 0) = -1.0;
  const auto grid = sample_sphere(724).directions;
  const Directions reflected = grid * reflect;
  const auto refl = fit_sh(eval_sh(t.wm_fodf, reflected), grid, 8, 0.0);
  EXPECT_NEAR(acc(t.wm_fodf, refl), 1.0, 1e-9);
}

TEST(GroundTruth, ZeroWhiteMatter) {
  VoxelSpec s;
  s.vf << 0, 0.6, 0.4;
  const auto t = ground_truth_target(s);
  EXPECT_EQ(t.wm_fodf.coeffs.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(t.vf, s.vf);
  VoxelSpec bad;
  EXPECT_THROW(ground_truth_target(bad), ValidationError);
}

TEST(GroundTruth, ApodizedDeltaIsNonNegativeWithSmallRipple) {
  const auto c = apodized_delta(Eigen::Vector3d::UnitZ());
  const auto v = eval_sh(c, sample_sphere(4000).directions);
  EXPECT_GE(v.minCoeff(), -1e-12 * v.maxCoeff());
  const auto a = fodf_apodization();
  EXPECT_EQ(a[0], 1.0);
  for (int i = 1; i < a.size(); ++i) EXPECT_LT(a[i], a[i - 1]);
}

TEST(GroundTruth, RotationEquivariant) {
  std::mt19937_64 rng(4);
  PhantomConfig cfg;
  const auto grid = sample_sphere(724).directions;
  for (std::uint64_t v = 0; v < 10; ++v) {
    auto spec = draw_voxel_spec(cfg, 1, v);
    if (spec.vf[0] <= 0.0) continue;
    const Eigen::Matrix3d r = random_rotation(rng);
    auto rotated = spec;
    for (auto& f : rotated.fibers) f.direction = r * f.direction;
    const auto direct = ground_truth_target(rotated).wm_fodf;
    const auto resampled = rotate_sh(ground_truth_target(spec).wm_fodf, r, grid);
    EXPECT_LT((direct.coeffs - resampled.coeffs).cwiseAbs().maxCoeff(), 1e-3);
  }
}

TEST(RicianNoise, NoiselessLimitAndDeterminism) {
  const Eigen::VectorXd s = Eigen::VectorXd::LinSpaced(20, 0.1, 1.0);
  EXPECT_LT((add_rician_noise(s, 1e9, 3) - s).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_EQ(add_rician_noise(s, 30, 3), add_rician_noise(s, 30, 3));
  EXPECT_NE(add_rician_noise(s, 30, 3), add_rician_noise(s, 30, 4));
  EXPECT_THROW(add_rician_noise(s, 0.0, 1), ValidationError);
}

TEST(RicianNoise, RayleighMeanOfZeroSignal) {
  const auto out = add_rician_noise(Eigen::VectorXd::Zero(100000), 20.0, 77);
  const double expect = (1.0 / 20.0) * std::sqrt(kPi / 2.0);
  EXPECT_NEAR(out.mean() / expect, 1.0, 0.02);
}

TEST(GenDataset, DeterministicAndTwins) {
  PhantomConfig cfg;
  const auto t = make_scheme(30);
  const auto a = gen_dataset(25, t, cfg, 123, true);
  const auto b = gen_dataset(25, t, cfg, 123, true);
  EXPECT_EQ(a.scan.signals, b.scan.signals);
  EXPECT_EQ(a.scan.targets, b.scan.targets);
  ASSERT_TRUE(a.rescan);
  EXPECT_EQ(a.rescan->targets, a.scan.targets);
  EXPECT_NE(a.rescan->signals, a.scan.signals);
  EXPECT_NE(gen_dataset(25, t, cfg, 124).scan.signals, a.scan.signals);
  // Prefix stability: voxel i does not depend on how many voxels are generated.
  EXPECT_EQ(gen_dataset(5, t, cfg, 123).scan.signals, a.scan.signals.topRows(5));
}

TEST(GenDataset, TargetsSumToOne) {
  PhantomConfig cfg;
  const auto d = gen_dataset(200, make_scheme(30), cfg, 5).scan;
  for (Eigen::Index v = 0; v < d.n_voxels(); ++v) EXPECT_NEAR(d.targets.row(v).tail(3).sum(), 1.0, 1e-6);
}

TEST(GenDataset, ForcedNinetyDegreeCrossingHasTwoPeaks) {
  PhantomConfig cfg;
  cfg.n_fibers_min = cfg.n_fibers_max = 2;
  cfg.angle_min_deg = cfg.angle_max_deg = 90.0;
  cfg.fiber_weight_alpha = 0.0;
  cfg.snr.reset();
  const auto d = gen_dataset(20, make_scheme(30), cfg, 8).scan;
  for (Eigen::Index v = 0; v < d.n_voxels(); ++v) {
    const ShCoefficients f(8, d.targets.row(v).head(45).cast<double>().transpose());
    const auto peaks = find_peaks(f, 0.5);
    ASSERT_EQ(peaks.size(), 2u) << "voxel " << v;
    EXPECT_NEAR(axis_angle_deg(peaks[0].direction, peaks[1].direction), 90.0, 1.0);
  }
}

TEST(PhantomConfigJson, RoundTripAndValidation) {
  PhantomConfig cfg;
  cfg.snr = 20.0;
  cfg.angle_min_deg = 40.0;
  const auto back = phantom_config_from_json(to_json(cfg));
  EXPECT_EQ(back.snr, cfg.snr);
  EXPECT_EQ(back.angle_min_deg, 40.0);
  EXPECT_EQ(back.dirichlet, cfg.dirichlet);
  auto bad = to_json(cfg);
  bad["angle_deg"]["min"] = 100.0;
  EXPECT_THROW(phantom_config_from_json(bad), ValidationError);
  auto noiseless = to_json(cfg);
  noiseless["snr"] = nullptr;
  EXPECT_FALSE(phantom_config_from_json(noiseless).snr);
}

}  // namespace
}  // namespace msfodf
