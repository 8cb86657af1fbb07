#pragma once

// 3D-SHORE signal basis: Gaussian-Laguerre radial functions times even real SH.

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "msfodf/errors.hpp"
#include "msfodf/harmonics.hpp"
#include "msfodf/qspace.hpp"

namespace msfodf {

inline constexpr double kDefaultTau = 1.0 / (4.0 * kPi * kPi);
inline constexpr double kDefaultMd = 0.7e-3;
inline constexpr double kDefaultShoreReg = 1e-8;
inline constexpr int kDefaultShoreOrder = 6;
inline constexpr int kDefaultShoreMinRows = 45;

struct ShoreScale {
  double zeta = 0.0;  // mm^-2
  double tau = 0.0;   // s
  double md = 0.0;    // mm^2/s
};

/// zeta = 1 / (8 pi^2 tau MD).
inline ShoreScale compute_zeta(double md, double tau = kDefaultTau) {
  detail::require(md > 0.0 && std::isfinite(md), "mean diffusivity must be positive");
  detail::require(tau > 0.0 && std::isfinite(tau), "diffusion time must be positive");
  return {1.0 / (8.0 * kPi * kPi * tau * md), tau, md};
}

inline void validate_scale(const ShoreScale& s) {
  detail::require(s.zeta > 0.0 && s.tau > 0.0 && s.md > 0.0, "invalid SHORE scale");
  const double expect = 1.0 / (8.0 * kPi * kPi * s.tau * s.md);
  detail::require(std::abs(s.zeta - expect) <= 1e-12 * expect, "SHORE zeta inconsistent with tau and md");
}

constexpr int shore_count(int radial_order) {
  return (radial_order + 2) * (radial_order + 4) * (2 * radial_order + 3) / 24;
}

struct ShoreIndex {
  int n, l, m;
};

/// (n, l, m) per column: n = 0, 2, ..., N; l = 0, 2, ..., n; m = -l..l.
inline std::vector<ShoreIndex> shore_indices(int radial_order) {
  std::vector<ShoreIndex> out;
  for (int n = 0; n <= radial_order; n += 2)
    for (int l = 0; l <= n; l += 2)
      for (int m = -l; m <= l; ++m) out.push_back({n, l, m});
  return out;
}

struct ShoreCoefficients {
  int radial_order = kDefaultShoreOrder;
  Eigen::VectorXd coeffs;
  ShoreScale scale;
};

/// Generalized Laguerre polynomial L_k^(alpha)(x) by three-term recurrence.
inline double gen_laguerre(int k, double alpha, double x) {
  if (k == 0) return 1.0;
  double prev = 1.0;
  double cur = 1.0 + alpha - x;
  for (int i = 1; i < k; ++i) {
    const double next = ((2.0 * i + 1.0 + alpha - x) * cur - (i + alpha) * prev) / (i + 1.0);
    prev = cur;
    cur = next;
  }
  return cur;
}

inline double shore_radial(int n, int l, double q, const ShoreScale& s) {
  const int j = (n - l) / 2;
  const double x = q * q / s.zeta;
  const double kappa = std::sqrt(2.0 * std::tgamma(j + 1.0) / (std::pow(s.zeta, 1.5) * std::tgamma(j + l + 1.5)));
  const double angular_rise = l == 0 ? 1.0 : std::pow(x, 0.5 * l);
  return kappa * angular_rise * std::exp(-0.5 * x) * gen_laguerre(j, l + 0.5, x);
}

/// q-value of a b-value, from b = 4 pi^2 q^2 tau.
inline double q_from_b(double b, double tau) { return std::sqrt(b / (4.0 * kPi * kPi * tau)); }

/// Basis matrix over the selected measurement rows (all rows by default).
inline Eigen::MatrixXd shore_basis_matrix(const GradientTable& table, const ShoreScale& scale, int radial_order,
                                          const std::vector<int>& rows = {}) {
  detail::require(radial_order >= 0 && radial_order % 2 == 0, "SHORE radial order must be even");
  validate_scale(scale);
  std::vector<int> sel = rows;
  if (sel.empty())
    for (int i = 0; i < int(table.size()); ++i) sel.push_back(i);
  const auto idx = shore_indices(radial_order);
  Eigen::MatrixXd m(Eigen::Index(sel.size()), Eigen::Index(idx.size()));
  for (size_t r = 0; r < sel.size(); ++r) {
    const int i = sel[r];
    const double q = q_from_b(table.bvalues()[i], scale.tau);
    const Eigen::VectorXd y = q > 0.0 ? sh_values(table.directions().row(i).transpose(), radial_order)
                                      : Eigen::VectorXd::Unit(sh_count(radial_order), 0) / std::sqrt(kFourPi);
    for (size_t c = 0; c < idx.size(); ++c) {
      const auto [n, l, mm] = idx[c];
      m(Eigen::Index(r), Eigen::Index(c)) = shore_radial(n, l, q, scale) * y[sh_index(l, mm)];
    }
  }
  return m;
}

/// Measurement rows used for a fit: b0 rows plus rows of present shells.
inline std::vector<int> shore_rows(const GradientTable& table, const ShellMask& mask) {
  check_mask(mask, table);
  std::vector<int> rows;
  for (int i = 0; i < int(table.size()); ++i) {
    const int s = table.shell_ids()[i];
    if (s == kB0Shell || mask[s]) rows.push_back(i);
  }
  return rows;
}

struct ShoreFit {
  ShoreCoefficients coeffs;
  bool underdetermined = false;
  int rank = 0;
};

/// Precomputed Tikhonov least-squares projector for one (table, mask, scale).
/// Rows of absent shells are dropped from the system.
class ShoreFitter {
 public:
  ShoreFitter(const GradientTable& table, const ShoreScale& scale, int radial_order, const ShellMask& mask,
              double reg = kDefaultShoreReg, int min_rows = kDefaultShoreMinRows)
      : order_(radial_order), scale_(scale), rows_(shore_rows(table, mask)) {
    detail::require(reg >= 0.0, "SHORE regularization must be non-negative");
    if (int(rows_.size()) < min_rows)
      throw ValidationError("SHORE fit needs at least " + std::to_string(min_rows) + " rows, mask " + mask.str() +
                            " leaves " + std::to_string(rows_.size()));
    const Eigen::MatrixXd phi = shore_basis_matrix(table, scale, radial_order, rows_);
    const Eigen::Index nc = phi.cols();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(phi);
    const auto& sv = svd.singularValues();
    rank_ = 0;
    for (Eigen::Index i = 0; i < sv.size(); ++i)
      if (sv[i] > 1e-10 * sv[0]) ++rank_;
    underdetermined_ = rank_ < nc;
    if (reg == 0.0) {
      if (underdetermined_)
        throw ValidationError("singular SHORE system at reg=0 (rank " + std::to_string(rank_) + " < " +
                              std::to_string(nc) + ")");
      projector_ = phi.colPivHouseholderQr().solve(Eigen::MatrixXd::Identity(phi.rows(), phi.rows()));
    } else {
      Eigen::MatrixXd normal = phi.transpose() * phi;
      normal.diagonal().array() += reg;
      projector_ = normal.ldlt().solve(phi.transpose());
    }
  }

  const std::vector<int>& rows() const { return rows_; }
  bool underdetermined() const { return underdetermined_; }

  /// `signal` is the full per-measurement vector; only the fitter's rows are read.
  ShoreFit fit(const Eigen::Ref<const Eigen::VectorXd>& signal) const {
    Eigen::VectorXd s(Eigen::Index(rows_.size()));
    for (size_t r = 0; r < rows_.size(); ++r) s[Eigen::Index(r)] = signal[rows_[r]];
    return {{order_, projector_ * s, scale_}, underdetermined_, rank_};
  }

  /// [n_coeffs x n_rows]
  const Eigen::MatrixXd& projector() const { return projector_; }

 private:
  int order_;
  ShoreScale scale_;
  std::vector<int> rows_;
  Eigen::MatrixXd projector_;
  bool underdetermined_ = false;
  int rank_ = 0;
};

inline ShoreFit fit_shore(const MaskedSignal& signal, const GradientTable& table, const ShoreScale& scale,
                          int radial_order = kDefaultShoreOrder, double reg = kDefaultShoreReg) {
  return ShoreFitter(table, scale, radial_order, signal.mask, reg).fit(signal.values);
}

inline ShoreFit fit_shore(const Eigen::VectorXd& signal, const GradientTable& table, const ShoreScale& scale,
                          int radial_order = kDefaultShoreOrder, double reg = kDefaultShoreReg) {
  return ShoreFitter(table, scale, radial_order, ShellMask::all(table.num_shells()), reg).fit(signal);
}

inline Eigen::VectorXd eval_shore(const ShoreCoefficients& c, const GradientTable& table) {
  return shore_basis_matrix(table, c.scale, c.radial_order) * c.coeffs;
}

inline nlohmann::json to_json(const ShoreCoefficients& c) {
  return {{"radial_order", c.radial_order},
          {"zeta", c.scale.zeta},
          {"tau", c.scale.tau},
          {"md", c.scale.md},
          {"coeffs", std::vector<double>(c.coeffs.data(), c.coeffs.data() + c.coeffs.size())}};
}

inline ShoreCoefficients shore_from_json(const nlohmann::json& j) {
  ShoreCoefficients c;
  c.radial_order = j.at("radial_order").get<int>();
  c.scale = {j.at("zeta").get<double>(), j.at("tau").get<double>(), j.at("md").get<double>()};
  const auto v = j.at("coeffs").get<std::vector<double>>();
  detail::require(int(v.size()) == shore_count(c.radial_order), "SHORE coefficient count does not match order");
  c.coeffs = Eigen::Map<const Eigen::VectorXd>(v.data(), Eigen::Index(v.size()));
  return c;
}

}  // namespace msfodf
