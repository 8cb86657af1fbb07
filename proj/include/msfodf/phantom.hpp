#pragma once

// Synthetic multi-tissue voxels: multi-tensor white matter plus isotropic grey
// matter and CSF, with analytic fODF targets and Rician magnitude noise.

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "msfodf/errors.hpp"
#include "msfodf/harmonics.hpp"
#include "msfodf/qspace.hpp"

namespace msfodf {

inline constexpr const char* kPhantomGeneratorVersion = "msfodf-phantom-1";
inline constexpr int kFodfOrder = 8;
inline constexpr int kFodfCoeffs = sh_count(kFodfOrder);  // 45
/// SNR at or above this value is treated as noiseless.
inline constexpr double kNoiselessSnr = 1e9;

struct TissueParams {
  double wm_ad = 1.7e-3;
  double wm_rd = 0.2e-3;
  double gm = 0.8e-3;
  double csf = 3.0e-3;
};

struct Fiber {
  Eigen::Vector3d direction;
  double weight = 1.0;
};

struct VoxelSpec {
  std::vector<Fiber> fibers;
  Eigen::Vector3d vf{1.0, 0.0, 0.0};  // WM, GM, CSF
  TissueParams tissue;

  void validate() const {
    detail::require((vf.array() >= 0.0).all(), "volume fractions must be non-negative");
    detail::require(std::abs(vf.sum() - 1.0) <= 1e-9, "volume fractions must sum to 1");
    if (vf[0] > 0.0) {
      detail::require(!fibers.empty(), "white-matter fraction > 0 needs at least one fiber");
      double w = 0.0;
      for (const auto& f : fibers) {
        detail::require(f.weight >= 0.0, "fiber weights must be non-negative");
        detail::require(std::abs(f.direction.norm() - 1.0) <= 1e-6, "fiber directions must be unit norm");
        w += f.weight;
      }
      detail::require(std::abs(w - 1.0) <= 1e-9, "fiber weights must sum to 1");
    }
  }
};

struct VoxelTarget {
  ShCoefficients wm_fodf;
  Eigen::Vector3d vf;

  /// 45 fODF coefficients followed by the 3 fractions.
  Eigen::VectorXd concat() const {
    Eigen::VectorXd out(wm_fodf.coeffs.size() + 3);
    out << wm_fodf.coeffs, vf;
    return out;
  }
};

/// S(b, g) = s0 [vf_wm sum_i w_i exp(-b g'D_i g) + vf_gm exp(-b d_gm) + vf_csf exp(-b d_csf)].
inline Eigen::VectorXd simulate_signal(const VoxelSpec& spec, const GradientTable& table, double s0 = 1.0) {
  spec.validate();
  const auto& t = spec.tissue;
  auto mix = [&](double b, const Eigen::Vector3d& g) {
    double wm = 0.0;
    for (const auto& f : spec.fibers) {
      const double c = g.dot(f.direction);
      wm += f.weight * std::exp(-b * (t.wm_rd + (t.wm_ad - t.wm_rd) * c * c));
    }
    return spec.vf[0] * wm + spec.vf[1] * std::exp(-b * t.gm) + spec.vf[2] * std::exp(-b * t.csf);
  };
  // Dividing by the b = 0 mixture removes rounding in the fraction sums, so S(0) == s0.
  const double total = mix(0.0, Eigen::Vector3d::UnitZ());
  Eigen::VectorXd s(table.size());
  for (Eigen::Index i = 0; i < table.size(); ++i)
    s[i] = s0 * (mix(table.bvalues()[i], table.directions().row(i).transpose()) / total);
  return s;
}

/// Per-degree attenuation of the target delta: the normalized Legendre spectrum
/// of p(t)^2, where p is the unit-mass order-4 delta. p^2 is non-negative, so
/// the order-8 target has no negative lobes.
inline Eigen::VectorXd fodf_apodization(int order = kFodfOrder) {
  const int half = order / 2;
  const auto [nodes, weights] = detail::gauss_legendre(64);
  Eigen::VectorXd a(half + 1);
  for (int li = 0; li <= half; ++li) {
    const int l = 2 * li;
    double acc_l = 0.0;
    for (size_t q = 0; q < nodes.size(); ++q) {
      double p = 0.0;
      for (int k = 0; k <= half; k += 2) p += (2.0 * k + 1.0) * detail::legendre(k, nodes[q]);
      acc_l += weights[q] * p * p * detail::legendre(l, nodes[q]);
    }
    a[li] = acc_l;
  }
  return a / a[0];
}

/// Band-limited, apodized delta at direction u: a_l Y_lm(u).
inline ShCoefficients apodized_delta(const Eigen::Vector3d& u, int order = kFodfOrder) {
  const Eigen::VectorXd a = fodf_apodization(order);
  Eigen::VectorXd c = sh_values(u, order);
  for (int l = 0; l <= order; l += 2) c.segment(sh_degree_offset(l), 2 * l + 1) *= a[l / 2];
  return {order, c};
}

inline VoxelTarget ground_truth_target(const VoxelSpec& spec, int order = kFodfOrder) {
  detail::require(order >= 0 && order % 2 == 0, "target order must be even");
  spec.validate();
  VoxelTarget t{ShCoefficients::zero(order), spec.vf};
  if (spec.vf[0] <= 0.0) return t;
  for (const auto& f : spec.fibers) t.wm_fodf.coeffs += f.weight * apodized_delta(f.direction, order).coeffs;
  return t;
}

/// out = sqrt((s + n1)^2 + n2^2), n ~ N(0, (s0/snr)^2).
inline Eigen::VectorXd add_rician_noise(const Eigen::VectorXd& signal, double snr, std::uint64_t seed,
                                        double s0 = 1.0) {
  detail::require(snr > 0.0, "SNR must be positive");
  if (snr >= kNoiselessSnr) return signal;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, s0 / snr);
  Eigen::VectorXd out(signal.size());
  for (Eigen::Index i = 0; i < signal.size(); ++i) {
    const double re = signal[i] + g(rng);
    const double im = g(rng);
    out[i] = std::sqrt(re * re + im * im);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Acquisition scheme and dataset generation

/// `n_b0` b=0 measurements followed by `per_shell` Fibonacci directions per b-value,
/// each shell rotated differently so shells do not share directions.
inline GradientTable make_scheme(int per_shell = 90, const std::vector<double>& bvals = kDefaultNominalBvalues,
                                 int n_b0 = 6) {
  detail::require(per_shell >= 6 && n_b0 >= 0, "invalid scheme size");
  const SphereSampling base = sample_sphere(per_shell);
  const Eigen::Index n = n_b0 + per_shell * Eigen::Index(bvals.size());
  Directions d(n, 3);
  Eigen::VectorXd b(n);
  for (int i = 0; i < n_b0; ++i) {
    d.row(i) << 0.0, 0.0, 0.0;
    b[i] = 0.0;
  }
  for (size_t k = 0; k < bvals.size(); ++k) {
    const Eigen::Matrix3d rot = (Eigen::AngleAxisd(0.7 * double(k), Eigen::Vector3d::UnitZ()) *
                                 Eigen::AngleAxisd(0.4 * double(k), Eigen::Vector3d::UnitX()))
                                    .toRotationMatrix();
    for (int j = 0; j < per_shell; ++j) {
      const Eigen::Index i = n_b0 + Eigen::Index(k) * per_shell + j;
      d.row(i) = (rot * base.directions.row(j).transpose()).transpose();
      b[i] = bvals[k];
    }
  }
  return GradientTable::from_measurements(d, b, bvals);
}

struct PhantomConfig {
  int n_fibers_min = 1;
  int n_fibers_max = 3;
  double angle_min_deg = 30.0;
  double angle_max_deg = 90.0;
  std::array<double, 3> dirichlet{5.0, 2.0, 1.0};
  /// Symmetric Dirichlet concentration for fiber weights; 0 means equal weights.
  double fiber_weight_alpha = 4.0;
  std::optional<double> snr = 30.0;  // empty: noiseless
  TissueParams tissue;
  double s0 = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(n_fibers_min >= 1 && n_fibers_max >= n_fibers_min && n_fibers_max <= 5,
                    "n_fibers range must satisfy 1 <= min <= max <= 5");
    detail::require(angle_min_deg > 0.0 && angle_max_deg >= angle_min_deg && angle_max_deg <= 90.0,
                    "angle_deg range must satisfy 0 < min <= max <= 90");
    for (double a : dirichlet) detail::require(a > 0.0, "dirichlet parameters must be positive");
    detail::require(fiber_weight_alpha >= 0.0, "fiber_weight_alpha must be non-negative");
    if (snr) detail::require(*snr > 0.0, "snr must be positive");
    detail::require(tissue.wm_ad > 0.0 && tissue.wm_rd > 0.0 && tissue.gm > 0.0 && tissue.csf > 0.0,
                    "diffusivities must be positive");
    detail::require(s0 > 0.0, "s0 must be positive");
  }
};

inline nlohmann::json to_json(const TissueParams& t) {
  return {{"wm_ad", t.wm_ad}, {"wm_rd", t.wm_rd}, {"gm", t.gm}, {"csf", t.csf}};
}

inline nlohmann::json to_json(const PhantomConfig& c) {
  return {{"n_fibers", {{"min", c.n_fibers_min}, {"max", c.n_fibers_max}}},
          {"angle_deg", {{"min", c.angle_min_deg}, {"max", c.angle_max_deg}}},
          {"dirichlet", c.dirichlet},
          {"fiber_weight_alpha", c.fiber_weight_alpha},
          {"snr", c.snr ? nlohmann::json(*c.snr) : nlohmann::json(nullptr)},
          {"diffusivities", to_json(c.tissue)},
          {"s0", c.s0},
          {"seed", c.seed}};
}

inline PhantomConfig phantom_config_from_json(const nlohmann::json& j) {
  PhantomConfig c;
  try {
    if (j.contains("n_fibers")) {
      c.n_fibers_min = j["n_fibers"].value("min", c.n_fibers_min);
      c.n_fibers_max = j["n_fibers"].value("max", c.n_fibers_max);
    }
    if (j.contains("angle_deg")) {
      c.angle_min_deg = j["angle_deg"].value("min", c.angle_min_deg);
      c.angle_max_deg = j["angle_deg"].value("max", c.angle_max_deg);
    }
    if (j.contains("dirichlet")) c.dirichlet = j["dirichlet"].get<std::array<double, 3>>();
    c.fiber_weight_alpha = j.value("fiber_weight_alpha", c.fiber_weight_alpha);
    if (j.contains("snr")) {
      if (j["snr"].is_null())
        c.snr.reset();
      else
        c.snr = j["snr"].get<double>();
    }
    if (j.contains("diffusivities")) {
      const auto& d = j["diffusivities"];
      c.tissue.wm_ad = d.value("wm_ad", c.tissue.wm_ad);
      c.tissue.wm_rd = d.value("wm_rd", c.tissue.wm_rd);
      c.tissue.gm = d.value("gm", c.tissue.gm);
      c.tissue.csf = d.value("csf", c.tissue.csf);
    }
    c.s0 = j.value("s0", c.s0);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid phantom config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace detail {

inline std::mt19937_64 voxel_stream(std::uint64_t seed, std::uint64_t voxel, std::uint64_t stream) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(voxel), std::uint32_t(voxel >> 32),
                    std::uint32_t(stream)};
  return std::mt19937_64(seq);
}

template <class Rng>
Eigen::Vector3d random_unit(Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::Vector3d v;
  do {
    v << g(rng), g(rng), g(rng);
  } while (v.norm() < 1e-12);
  return v.normalized();
}

/// Unit vector at `angle` from `axis` with uniform azimuth.
template <class Rng>
Eigen::Vector3d at_angle(const Eigen::Vector3d& axis, double angle, Rng& rng) {
  Eigen::Vector3d perp = axis.unitOrthogonal();
  const double az = std::uniform_real_distribution<double>(0.0, 2.0 * kPi)(rng);
  perp = Eigen::AngleAxisd(az, axis) * perp;
  return (std::cos(angle) * axis + std::sin(angle) * perp).normalized();
}

template <class Rng>
std::vector<double> dirichlet(const std::vector<double>& alpha, Rng& rng) {
  std::vector<double> x(alpha.size());
  double s = 0.0;
  for (size_t i = 0; i < alpha.size(); ++i) {
    x[i] = std::gamma_distribution<double>(alpha[i], 1.0)(rng);
    s += x[i];
  }
  for (auto& v : x) v /= s;
  return x;
}

}  // namespace detail

/// Draws the tissue layout of voxel `index`. A pure function of (config, seed, index).
inline VoxelSpec draw_voxel_spec(const PhantomConfig& cfg, std::uint64_t seed, std::uint64_t index) {
  auto rng = detail::voxel_stream(seed, index, 0);
  VoxelSpec spec;
  spec.tissue = cfg.tissue;
  const int nf = std::uniform_int_distribution<int>(cfg.n_fibers_min, cfg.n_fibers_max)(rng);
  const double amin = cfg.angle_min_deg * kPi / 180.0;
  const double amax = cfg.angle_max_deg * kPi / 180.0;
  std::uniform_real_distribution<double> angle(amin, amax);
  std::vector<Eigen::Vector3d> dirs{detail::random_unit(rng)};
  while (int(dirs.size()) < nf) {
    // Angle measured from the first fiber; retry until every pair is at least amin apart.
    Eigen::Vector3d cand;
    bool ok = false;
    for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
      cand = detail::at_angle(dirs.front(), angle(rng), rng);
      ok = true;
      for (const auto& d : dirs)
        if (std::acos(std::min(1.0, std::abs(d.dot(cand)))) < amin - 1e-12) ok = false;
    }
    dirs.push_back(cand);
  }
  std::vector<double> w(nf, 1.0 / nf);
  if (cfg.fiber_weight_alpha > 0.0 && nf > 1) w = detail::dirichlet(std::vector<double>(nf, cfg.fiber_weight_alpha), rng);
  for (int i = 0; i < nf; ++i) spec.fibers.push_back({dirs[i], w[i]});
  const auto vf = detail::dirichlet({cfg.dirichlet[0], cfg.dirichlet[1], cfg.dirichlet[2]}, rng);
  spec.vf << vf[0], vf[1], vf[2];
  spec.vf /= spec.vf.sum();
  return spec;
}

struct PhantomData {
  VoxelDataset scan;
  std::optional<VoxelDataset> rescan;
};

/// Generates `n_voxels` voxels. Each voxel draws from its own stream keyed by
/// (seed, voxel index), so the result does not depend on evaluation order. The
/// rescan twin shares specs and targets and differs only in its noise stream.
inline PhantomData gen_dataset(Eigen::Index n_voxels, const GradientTable& table, const PhantomConfig& cfg,
                               std::uint64_t seed, bool with_rescan = false) {
  cfg.validate();
  detail::require(n_voxels >= 1, "need at least one voxel");
  PhantomData out;
  auto init = [&](VoxelDataset& ds) {
    ds.signals.resize(n_voxels, table.size());
    ds.targets.resize(n_voxels, kTargetWidth);
    ds.table = table;
    ds.seed = seed;
    if (cfg.snr && *cfg.snr < kNoiselessSnr) ds.snr = *cfg.snr;
    ds.generator_version = kPhantomGeneratorVersion;
    ds.metadata = {{"phantom", to_json(cfg)}, {"fodf_order", kFodfOrder}};
  };
  init(out.scan);
  if (with_rescan) {
    out.rescan.emplace();
    init(*out.rescan);
    out.rescan->metadata["scan"] = "rescan";
  }
  const double snr = cfg.snr.value_or(std::numeric_limits<double>::infinity());
  for (Eigen::Index v = 0; v < n_voxels; ++v) {
    const VoxelSpec spec = draw_voxel_spec(cfg, seed, std::uint64_t(v));
    const Eigen::VectorXd clean = simulate_signal(spec, table, cfg.s0);
    const Eigen::VectorXf target = ground_truth_target(spec).concat().cast<float>();
    auto noise_seed = [&](std::uint64_t scan) { return detail::voxel_stream(seed, std::uint64_t(v), 1 + scan)(); };
    out.scan.signals.row(v) = add_rician_noise(clean, snr, noise_seed(0), cfg.s0).cast<float>().transpose();
    out.scan.targets.row(v) = target.transpose();
    if (with_rescan) {
      out.rescan->signals.row(v) = add_rician_noise(clean, snr, noise_seed(1), cfg.s0).cast<float>().transpose();
      out.rescan->targets.row(v) = target.transpose();
    }
  }
  return out;
}

}  // namespace msfodf
