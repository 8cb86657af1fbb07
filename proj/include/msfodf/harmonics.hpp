#pragma once

// Real, even-degree, orthonormal spherical harmonics.
//
// Ordering is (l ascending, m = -l..l) over even l only, so order L holds
// (L+1)(L+2)/2 coefficients. m > 0 uses sqrt(2) Re(Y_l^m), m < 0 uses
// sqrt(2) Im(Y_l^|m|), both with the Condon-Shortley phase.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "msfodf/errors.hpp"

namespace msfodf {

using Directions = Eigen::Matrix<double, Eigen::Dynamic, 3>;

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kFourPi = 4.0 * std::numbers::pi;
inline constexpr const char* kShConvention = "orthonormal-full-m";

/// Default Laplace-Beltrami regularization for noisy signal fits.
inline constexpr double kDefaultLaplaceReg = 0.006;

constexpr int sh_count(int order) { return (order + 1) * (order + 2) / 2; }

/// Column of coefficient (l, m); l must be even.
constexpr int sh_index(int l, int m) { return l * (l - 1) / 2 + l + m; }

/// Start offset of degree l in the coefficient vector.
constexpr int sh_degree_offset(int l) { return l * (l - 1) / 2; }

/// Degree of each coefficient slot.
inline std::vector<int> sh_degrees(int order) {
  std::vector<int> out;
  out.reserve(sh_count(order));
  for (int l = 0; l <= order; l += 2)
    for (int m = -l; m <= l; ++m) out.push_back(l);
  return out;
}

class DegenerateFodfError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

struct ShCoefficients {
  int order = 0;
  Eigen::VectorXd coeffs;

  ShCoefficients() : coeffs(Eigen::VectorXd::Zero(1)) {}
  ShCoefficients(int order_, Eigen::VectorXd c) : order(order_), coeffs(std::move(c)) {
    detail::require(order >= 0 && order % 2 == 0, "SH order must be even and non-negative");
    detail::require(coeffs.size() == sh_count(order),
                    "SH coefficient count " + std::to_string(coeffs.size()) + " does not match order " +
                        std::to_string(order));
    detail::require(coeffs.allFinite(), "SH coefficients must be finite");
  }

  static ShCoefficients zero(int order) { return {order, Eigen::VectorXd::Zero(sh_count(order))}; }

  double operator()(int l, int m) const { return coeffs[sh_index(l, m)]; }
  double& operator()(int l, int m) { return coeffs[sh_index(l, m)]; }
};

namespace detail {

inline void check_order(int order, int max_order = 16) {
  require(order >= 0 && order % 2 == 0, "SH order must be even, got " + std::to_string(order));
  require(order <= max_order, "SH order above " + std::to_string(max_order) + " is not supported");
}

inline void check_unit(const Directions& dirs, double tol = 1e-6) {
  for (Eigen::Index i = 0; i < dirs.rows(); ++i) {
    const double n = dirs.row(i).norm();
    require(std::abs(n - 1.0) <= tol,
            "direction " + std::to_string(i) + " is not unit norm (|u| = " + std::to_string(n) + ")");
  }
}

// Fully normalized associated Legendre functions sqrt((2l+1)/4pi (l-m)!/(l+m)!) P_l^m(x),
// Condon-Shortley phase included. Output indexed [l * (order + 1) + m], m >= 0.
inline void normalized_legendre(int order, double x, std::vector<double>& out) {
  const int stride = order + 1;
  out.assign(static_cast<size_t>(stride * stride), 0.0);
  const double s = std::sqrt(std::max(0.0, 1.0 - x * x));
  double pmm = 1.0 / std::sqrt(kFourPi);
  for (int m = 0; m <= order; ++m) {
    if (m > 0) pmm *= -std::sqrt((2.0 * m + 1.0) / (2.0 * m)) * s;
    out[m * stride + m] = pmm;
    if (m + 1 > order) break;
    double prev2 = pmm;
    double prev1 = std::sqrt(2.0 * m + 3.0) * x * pmm;
    out[(m + 1) * stride + m] = prev1;
    for (int l = m + 2; l <= order; ++l) {
      const double a = std::sqrt((4.0 * l * l - 1.0) / (double(l) * l - double(m) * m));
      const double b = std::sqrt((double(l - 1) * (l - 1) - double(m) * m) / (4.0 * (l - 1) * (l - 1) - 1.0));
      const double cur = a * (x * prev1 - b * prev2);
      out[l * stride + m] = cur;
      prev2 = prev1;
      prev1 = cur;
    }
  }
}

/// Legendre polynomial P_l(x).
inline double legendre(int l, double x) {
  if (l == 0) return 1.0;
  double p0 = 1.0, p1 = x;
  for (int k = 2; k <= l; ++k) {
    const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
    p0 = p1;
    p1 = p2;
  }
  return p1;
}

/// n-point Gauss-Legendre nodes and weights on [-1, 1].
inline std::pair<std::vector<double>, std::vector<double>> gauss_legendre(int n) {
  std::vector<double> x(n), w(n);
  for (int i = 0; i < n; ++i) {
    double z = std::cos(kPi * (i + 0.75) / (n + 0.5));
    double dp = 1.0;
    for (int it = 0; it < 100; ++it) {
      const double p = legendre(n, z);
      dp = n * (z * p - legendre(n - 1, z)) / (z * z - 1.0);
      const double dz = p / dp;
      z -= dz;
      if (std::abs(dz) < 1e-15) break;
    }
    dp = n * (z * legendre(n, z) - legendre(n - 1, z)) / (z * z - 1.0);
    x[i] = z;
    w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
  }
  return {x, w};
}

}  // namespace detail

/// Real SH values at one unit direction.
inline Eigen::VectorXd sh_values(const Eigen::Vector3d& u, int order) {
  detail::check_order(order);
  std::vector<double> plm;
  const double z = std::clamp(u.z(), -1.0, 1.0);
  detail::normalized_legendre(order, z, plm);
  const double phi = std::atan2(u.y(), u.x());
  const int stride = order + 1;
  Eigen::VectorXd y(sh_count(order));
  for (int l = 0; l <= order; l += 2) {
    y[sh_index(l, 0)] = plm[l * stride];
    for (int m = 1; m <= l; ++m) {
      const double p = std::sqrt(2.0) * plm[l * stride + m];
      y[sh_index(l, m)] = p * std::cos(m * phi);
      y[sh_index(l, -m)] = p * std::sin(m * phi);
    }
  }
  return y;
}

/// Basis matrix [n_dirs x n_coeffs]; entry (i, j) is SH function j at direction i.
inline Eigen::MatrixXd sh_basis_matrix(const Directions& dirs, int order) {
  detail::check_order(order);
  detail::check_unit(dirs);
  Eigen::MatrixXd b(dirs.rows(), sh_count(order));
  for (Eigen::Index i = 0; i < dirs.rows(); ++i) b.row(i) = sh_values(dirs.row(i).transpose(), order).transpose();
  return b;
}

/// Diagonal l(l+1) per coefficient.
inline Eigen::VectorXd laplacian_diagonal(int order) {
  const auto deg = sh_degrees(order);
  Eigen::VectorXd d(deg.size());
  for (size_t j = 0; j < deg.size(); ++j) d[j] = double(deg[j]) * (deg[j] + 1);
  return d;
}

/// Precomputed regularized least-squares projector for a fixed direction set.
class ShFitter {
 public:
  ShFitter(const Directions& dirs, int order, double laplace_reg)
      : order_(order), basis_(sh_basis_matrix(dirs, order)) {
    detail::require(laplace_reg >= 0.0, "Laplace regularization must be non-negative");
    const int nc = sh_count(order);
    if (laplace_reg == 0.0) {
      Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(basis_);
      if (basis_.rows() < nc || qr.rank() < nc)
        throw ValidationError("rank-deficient SH fit: " + std::to_string(basis_.rows()) + " directions, " +
                              std::to_string(nc) + " coefficients, rank " + std::to_string(qr.rank()));
      projector_ = qr.solve(Eigen::MatrixXd::Identity(basis_.rows(), basis_.rows()));
    } else {
      const Eigen::VectorXd lap = laplacian_diagonal(order);
      Eigen::MatrixXd normal = basis_.transpose() * basis_;
      normal.diagonal() += laplace_reg * lap.cwiseAbs2();
      Eigen::LDLT<Eigen::MatrixXd> ldlt(normal);
      if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
        throw ValidationError("SH normal equations are singular");
      projector_ = ldlt.solve(basis_.transpose());
    }
  }

  int order() const { return order_; }
  const Eigen::MatrixXd& basis() const { return basis_; }
  /// [n_coeffs x n_dirs]
  const Eigen::MatrixXd& projector() const { return projector_; }

  ShCoefficients fit(const Eigen::Ref<const Eigen::VectorXd>& signal) const {
    detail::require(signal.size() == basis_.rows(), "signal length does not match direction count");
    return {order_, projector_ * signal};
  }

 private:
  int order_;
  Eigen::MatrixXd basis_;
  Eigen::MatrixXd projector_;
};

/// Solves min |Bc - s|^2 + lambda |Lc|^2 with L = diag(l(l+1)).
inline ShCoefficients fit_sh(const Eigen::VectorXd& signal, const Directions& dirs, int order,
                             double laplace_reg) {
  return ShFitter(dirs, order, laplace_reg).fit(signal);
}

inline Eigen::VectorXd eval_sh(const ShCoefficients& c, const Directions& dirs) {
  return sh_basis_matrix(dirs, c.order) * c.coeffs;
}

/// Angular correlation coefficient. Degree 0 is excluded from the numerator and both norms.
inline double acc(const ShCoefficients& u, const ShCoefficients& v) {
  detail::require(u.order == v.order, "ACC needs equal SH orders");
  const Eigen::Index n = u.coeffs.size() - 1;
  const auto uu = u.coeffs.tail(n);
  const auto vv = v.coeffs.tail(n);
  const double nu = uu.squaredNorm();
  const double nv = vv.squaredNorm();
  if (nu == 0.0 || nv == 0.0)
    throw DegenerateFodfError("degenerate isotropic fODF: all degree >= 2 coefficients are zero");
  return uu.dot(vv) / (std::sqrt(nu) * std::sqrt(nv));
}

/// Per-degree energy sum_m c_lm^2, one entry per even degree.
inline Eigen::VectorXd power_spectrum(const ShCoefficients& c) {
  Eigen::VectorXd p(c.order / 2 + 1);
  for (int l = 0; l <= c.order; l += 2)
    p[l / 2] = c.coeffs.segment(sh_degree_offset(l), 2 * l + 1).squaredNorm();
  return p;
}

struct SphereSampling {
  Directions directions;
  Eigen::VectorXd weights;

  Eigen::Index size() const { return directions.rows(); }
};

/// Spherical Fibonacci point set with uniform weights 4pi/n.
inline SphereSampling sample_sphere(int n) {
  detail::require(n >= 6, "sphere sampling needs at least 6 points");
  SphereSampling s;
  s.directions.resize(n, 3);
  const double golden = kPi * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < n; ++i) {
    const double z = 1.0 - (2.0 * i + 1.0) / n;
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * i;
    s.directions.row(i) << r * std::cos(phi), r * std::sin(phi), z;
  }
  s.weights = Eigen::VectorXd::Constant(n, kFourPi / n);
  return s;
}

/// Fibonacci points whose weights are corrected (minimum-norm change) so that
/// every even-degree SH up to `exact_degree` integrates exactly.
inline SphereSampling exact_quadrature(int n, int exact_degree = 16) {
  SphereSampling s = sample_sphere(n);
  const Eigen::MatrixXd a = sh_basis_matrix(s.directions, exact_degree).transpose();
  detail::require(a.rows() < n, "too few points for the requested quadrature degree");
  Eigen::VectorXd target = Eigen::VectorXd::Zero(a.rows());
  target[0] = std::sqrt(kFourPi);
  const Eigen::VectorXd resid = target - a * s.weights;
  const Eigen::MatrixXd gram = a * a.transpose();
  s.weights += a.transpose() * gram.ldlt().solve(resid);
  detail::require((s.weights.array() > 0.0).all(), "corrected quadrature produced non-positive weights");
  return s;
}

/// Uniform random rotation (unit quaternion from a 4D Gaussian).
template <class Rng>
Eigen::Matrix3d random_rotation(Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::Quaterniond q(g(rng), g(rng), g(rng), g(rng));
  q.normalize();
  return q.toRotationMatrix();
}

/// Rotated copy f'(u) = f(R^T u), computed by resampling on `grid` and refitting.
inline ShCoefficients rotate_sh(const ShCoefficients& c, const Eigen::Matrix3d& rot, const Directions& grid) {
  const Directions back = grid * rot;  // rows are (R^T u_i)^T
  const Eigen::VectorXd values = eval_sh(c, back);
  return fit_sh(values, grid, c.order, 0.0);
}

inline nlohmann::json to_json(const ShCoefficients& c) {
  return {{"order", c.order},
          {"convention", kShConvention},
          {"coeffs", std::vector<double>(c.coeffs.data(), c.coeffs.data() + c.coeffs.size())}};
}

inline ShCoefficients sh_from_json(const nlohmann::json& j) {
  detail::require(j.contains("order") && j.contains("coeffs"), "SH JSON needs 'order' and 'coeffs'");
  if (j.contains("convention"))
    detail::require(j.at("convention").get<std::string>() == kShConvention,
                    "unsupported SH convention " + j.at("convention").get<std::string>());
  const auto v = j.at("coeffs").get<std::vector<double>>();
  return {j.at("order").get<int>(), Eigen::Map<const Eigen::VectorXd>(v.data(), Eigen::Index(v.size()))};
}

}  // namespace msfodf
