#pragma once

// Multi-shell multi-tissue constrained spherical deconvolution.
//
// The WM fODF is non-negative on a fixed constraint grid. The resulting
// inequality-constrained least squares problem is reduced to a least-distance
// program and solved with a single NNLS call.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "msfodf/errors.hpp"
#include "msfodf/harmonics.hpp"
#include "msfodf/phantom.hpp"
#include "msfodf/qspace.hpp"

namespace msfodf {

inline constexpr int kConstraintGridSize = 724;

// ---------------------------------------------------------------------------
// Response functions

struct ResponseFunctions {
  int order = kFodfOrder;
  std::vector<double> shells;                // b-values; shells[0] is b = 0
  std::vector<Eigen::VectorXd> wm_zonal;     // per shell, one entry per even degree
  std::vector<double> gm;
  std::vector<double> csf;

  /// Index into `shells` of the response used for b-value b (nearest).
  int shell_for(double b) const {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < shells.size(); ++i) {
      const double d = std::abs(shells[i] - b);
      if (d < best_d) {
        best_d = d;
        best = int(i);
      }
    }
    return best;
  }
};

enum class ResponseMode { kPhantom, kDataDriven };

/// Zonal SH coefficients h_l = int R(u) Y_l0(u) du of an axially symmetric tensor
/// response exp(-b (rd + (ad - rd) cos^2)).
inline Eigen::VectorXd tensor_response_zonal(double b, double ad, double rd, int order) {
  const auto [x, w] = detail::gauss_legendre(96);
  Eigen::VectorXd h = Eigen::VectorXd::Zero(order / 2 + 1);
  for (int l = 0; l <= order; l += 2) {
    const double norm = std::sqrt((2.0 * l + 1.0) / kFourPi);
    double s = 0.0;
    for (size_t q = 0; q < x.size(); ++q)
      s += w[q] * std::exp(-b * (rd + (ad - rd) * x[q] * x[q])) * detail::legendre(l, x[q]);
    h[l / 2] = 2.0 * kPi * norm * s;
  }
  return h;
}

/// Analytic responses from known tissue diffusivities, one per nominal shell plus b = 0.
inline ResponseFunctions estimate_responses(const TissueParams& tissue, const GradientTable& table,
                                            int order = kFodfOrder, ResponseMode mode = ResponseMode::kPhantom) {
  if (mode != ResponseMode::kPhantom)
    throw ValidationError("data-driven response estimation is not supported; use phantom mode");
  ResponseFunctions r;
  r.order = order;
  r.shells.push_back(0.0);
  for (double b : table.nominal_bvalues()) r.shells.push_back(b);
  for (double b : r.shells) {
    r.wm_zonal.push_back(tensor_response_zonal(b, tissue.wm_ad, tissue.wm_rd, order));
    r.gm.push_back(std::exp(-b * tissue.gm));
    r.csf.push_back(std::exp(-b * tissue.csf));
  }
  return r;
}

inline nlohmann::json to_json(const ResponseFunctions& r) {
  std::vector<std::vector<double>> wm;
  for (const auto& h : r.wm_zonal) wm.emplace_back(h.data(), h.data() + h.size());
  return {{"shells", r.shells}, {"wm_zonal", wm}, {"gm", r.gm}, {"csf", r.csf}};
}

inline ResponseFunctions responses_from_json(const nlohmann::json& j) {
  ResponseFunctions r;
  r.shells = j.at("shells").get<std::vector<double>>();
  r.gm = j.at("gm").get<std::vector<double>>();
  r.csf = j.at("csf").get<std::vector<double>>();
  for (const auto& h : j.at("wm_zonal").get<std::vector<std::vector<double>>>())
    r.wm_zonal.push_back(Eigen::Map<const Eigen::VectorXd>(h.data(), Eigen::Index(h.size())));
  detail::require(!r.shells.empty() && r.wm_zonal.size() == r.shells.size() && r.gm.size() == r.shells.size() &&
                      r.csf.size() == r.shells.size(),
                  "responses JSON arrays must have one entry per shell");
  r.order = 2 * (int(r.wm_zonal.front().size()) - 1);
  return r;
}

/// Forward model [n_meas x (n_sh + 2)]: WM block, then GM and CSF columns.
inline Eigen::MatrixXd build_kernel_matrix(const ResponseFunctions& resp, const GradientTable& table,
                                           int order = kFodfOrder) {
  detail::require(resp.order >= order, "responses do not cover the requested order");
  const int nsh = sh_count(order);
  Eigen::MatrixXd k = Eigen::MatrixXd::Zero(table.size(), nsh + 2);
  for (Eigen::Index i = 0; i < table.size(); ++i) {
    const double b = table.bvalues()[i];
    const int s = resp.shell_for(b);
    const double tol = table.is_b0(i) ? kDefaultB0Threshold : kDefaultShellTolerance;
    if (s < 0 || std::abs(resp.shells[s] - b) > tol)
      throw ValidationError("no response for b=" + std::to_string(b) + " at measurement " + std::to_string(i));
    const Eigen::VectorXd& h = resp.wm_zonal[s];
    if (table.is_b0(i)) {
      k(i, 0) = h[0];  // only degree 0 survives at b = 0
    } else {
      const Eigen::VectorXd y = sh_values(table.directions().row(i).transpose(), order);
      for (int l = 0; l <= order; l += 2) {
        const double scale = std::sqrt(kFourPi / (2.0 * l + 1.0)) * h[l / 2];
        for (int m = -l; m <= l; ++m) k(i, sh_index(l, m)) = scale * y[sh_index(l, m)];
      }
    }
    k(i, nsh) = resp.gm[s];
    k(i, nsh + 1) = resp.csf[s];
  }
  return k;
}

// ---------------------------------------------------------------------------
// Non-negative least squares (Lawson-Hanson active set)

struct NnlsResult {
  Eigen::VectorXd x;
  int iterations = 0;
};

inline NnlsResult nnls(const Eigen::MatrixXd& a, const Eigen::VectorXd& b, int max_iter = -1) {
  detail::require(a.rows() == b.size(), "NNLS dimension mismatch");
  const Eigen::Index n = a.cols();
  if (max_iter < 0) max_iter = int(10 * n);
  NnlsResult res{Eigen::VectorXd::Zero(n), 0};
  const Eigen::VectorXd atb = a.transpose() * b;
  const double scale = atb.norm();
  if (scale == 0.0) return res;
  const double tol = 1e-12 * scale;

  std::vector<bool> passive(n, false);
  Eigen::VectorXd& x = res.x;
  Eigen::VectorXd w = atb;

  auto solve_passive = [&](Eigen::VectorXd& z) {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index j = 0; j < n; ++j)
      if (passive[j]) idx.push_back(j);
    Eigen::MatrixXd ap(a.rows(), Eigen::Index(idx.size()));
    for (size_t c = 0; c < idx.size(); ++c) ap.col(Eigen::Index(c)) = a.col(idx[c]);
    const Eigen::VectorXd zp = ap.colPivHouseholderQr().solve(b);
    z.setZero(n);
    for (size_t c = 0; c < idx.size(); ++c) z[idx[c]] = zp[Eigen::Index(c)];
  };

  Eigen::VectorXd z(n);
  while (true) {
    Eigen::Index jmax = -1;
    double wmax = tol;
    for (Eigen::Index j = 0; j < n; ++j)
      if (!passive[j] && w[j] > wmax) {
        wmax = w[j];
        jmax = j;
      }
    if (jmax < 0) break;
    if (++res.iterations > max_iter)
      throw NumericalError("NNLS exceeded " + std::to_string(max_iter) + " iterations");
    passive[jmax] = true;

    while (true) {
      solve_passive(z);
      bool feasible = true;
      for (Eigen::Index j = 0; j < n; ++j)
        if (passive[j] && z[j] <= 0.0) feasible = false;
      if (feasible) {
        x = z;
        break;
      }
      if (++res.iterations > max_iter)
        throw NumericalError("NNLS exceeded " + std::to_string(max_iter) + " iterations");
      double alpha = 1.0;
      for (Eigen::Index j = 0; j < n; ++j)
        if (passive[j] && z[j] <= 0.0) alpha = std::min(alpha, x[j] / (x[j] - z[j]));
      x += alpha * (z - x);
      for (Eigen::Index j = 0; j < n; ++j)
        if (passive[j] && x[j] <= 1e-15 * (1.0 + x.cwiseAbs().maxCoeff())) {
          passive[j] = false;
          x[j] = 0.0;
        }
    }
    w = a.transpose() * (b - a * x);
  }
  return res;
}

struct KktReport {
  double min_gradient = 0.0;          // min_j [A'(Ax - b)]_j, scaled by |A'b|
  double complementarity = 0.0;       // max_j |x_j [A'(Ax - b)]_j|, scaled by |A'b| (1 + |x|)
  double min_x = 0.0;
};

inline KktReport nnls_kkt(const Eigen::MatrixXd& a, const Eigen::VectorXd& b, const Eigen::VectorXd& x) {
  const double scale = std::max((a.transpose() * b).norm(), std::numeric_limits<double>::min());
  const Eigen::VectorXd g = a.transpose() * (a * x - b);
  KktReport r;
  r.min_gradient = g.minCoeff() / scale;
  r.complementarity = (x.array() * g.array()).abs().maxCoeff() / (scale * (1.0 + x.cwiseAbs().maxCoeff()));
  r.min_x = x.minCoeff();
  return r;
}

// ---------------------------------------------------------------------------
// MSMT-CSD

struct FodfSolution {
  ShCoefficients wm_fodf;
  Eigen::Vector3d vf = Eigen::Vector3d::Zero();
  Eigen::Vector3d weights = Eigen::Vector3d::Zero();  // unnormalized b=0 signal per compartment
  double residual_norm = 0.0;
  bool underdetermined = false;  // fewer distinct b-values than tissue compartments
};

/// Solver state shared by all voxels of one (table, mask): kernel, its QR, and
/// the transformed constraint matrix of the least-distance program.
class MsmtCsd {
 public:
  MsmtCsd(const ResponseFunctions& resp, const GradientTable& table, const std::optional<ShellMask>& mask = {},
          int order = kFodfOrder)
      : order_(order), grid_(sample_sphere(kConstraintGridSize)) {
    const ShellMask m = mask.value_or(ShellMask::all(table.num_shells()));
    check_mask(m, table);
    for (Eigen::Index i = 0; i < table.size(); ++i) {
      const int s = table.shell_ids()[i];
      if (s == kB0Shell || m[s]) rows_.push_back(int(i));
    }
    detail::require(!rows_.empty(), "no measurements selected");
    const Eigen::MatrixXd full = build_kernel_matrix(resp, table, order);
    Eigen::MatrixXd e(Eigen::Index(rows_.size()), full.cols());
    for (size_t r = 0; r < rows_.size(); ++r) e.row(Eigen::Index(r)) = full.row(rows_[r]);

    int present = m.count() + (table.b0_indices().empty() ? 0 : 1);
    underdetermined_ = present < 3;
    if (underdetermined_) {
      // Rank-limited system: a small ridge keeps R invertible.
      const double ridge = 1e-6 * e.squaredNorm() / double(e.cols());
      Eigen::MatrixXd aug(e.rows() + e.cols(), e.cols());
      aug << e, std::sqrt(ridge) * Eigen::MatrixXd::Identity(e.cols(), e.cols());
      e = aug;
    }
    kernel_ = e;
    qr_ = Eigen::HouseholderQR<Eigen::MatrixXd>(e);
    r_ = qr_.matrixQR().topRows(e.cols()).triangularView<Eigen::Upper>();

    // Constraints G x >= 0: fODF amplitudes on the grid, GM >= 0, CSF >= 0.
    const int nsh = sh_count(order);
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(grid_.size() + 2, nsh + 2);
    g.topLeftCorner(grid_.size(), nsh) = sh_basis_matrix(grid_.directions, order);
    g(grid_.size(), nsh) = 1.0;
    g(grid_.size() + 1, nsh + 1) = 1.0;
    grid_basis_ = g.topLeftCorner(grid_.size(), nsh);
    // G R^-1, via R^T X^T = G^T.
    g_hat_ = r_.transpose().triangularView<Eigen::Lower>().solve(g.transpose()).transpose();
  }

  FodfSolution fit(const Eigen::VectorXd& signal) const {
    detail::require(signal.size() >= Eigen::Index(*std::max_element(rows_.begin(), rows_.end())) + 1,
                    "signal shorter than table");
    Eigen::VectorXd f = Eigen::VectorXd::Zero(kernel_.rows());
    for (size_t r = 0; r < rows_.size(); ++r) f[Eigen::Index(r)] = signal[rows_[r]];
    detail::require(f.allFinite(), "signal must be finite");
    if (f.cwiseAbs().maxCoeff() == 0.0) throw ValidationError("empty signal");

    const Eigen::Index n = kernel_.cols();
    const Eigen::VectorXd f_tilde = (qr_.householderQ().transpose() * f).head(n);
    const Eigen::VectorXd h_hat = -g_hat_ * f_tilde;

    // Least-distance program min |z| s.t. g_hat z >= h_hat, via NNLS on [g_hat'; h_hat'] u ~ e_{n+1}.
    Eigen::MatrixXd e(n + 1, g_hat_.rows());
    e.topRows(n) = g_hat_.transpose();
    e.row(n) = h_hat.transpose();
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n + 1);
    rhs[n] = 1.0;
    const NnlsResult u = nnls(e, rhs, int(10 * e.cols()));
    const Eigen::VectorXd resid = e * u.x - rhs;
    if (!(std::abs(resid[n]) > 1e-14)) throw NumericalError("constrained deconvolution is infeasible");
    const Eigen::VectorXd z = -resid.head(n) / resid[n];
    const Eigen::VectorXd x = r_.triangularView<Eigen::Upper>().solve(z + f_tilde);

    const int nsh = sh_count(order_);
    FodfSolution sol;
    sol.wm_fodf = ShCoefficients(order_, x.head(nsh));
    sol.weights << std::sqrt(kFourPi) * x[0], std::max(0.0, x[nsh]), std::max(0.0, x[nsh + 1]);
    sol.weights[0] = std::max(0.0, sol.weights[0]);
    const double total = sol.weights.sum();
    sol.vf = total > 0.0 ? Eigen::Vector3d(sol.weights / total) : Eigen::Vector3d::Zero();
    sol.residual_norm = (kernel_.topRows(Eigen::Index(rows_.size())) * x - f.head(Eigen::Index(rows_.size()))).norm();
    sol.underdetermined = underdetermined_;
    return sol;
  }

  const SphereSampling& grid() const { return grid_; }
  const Eigen::MatrixXd& grid_basis() const { return grid_basis_; }
  bool underdetermined() const { return underdetermined_; }

 private:
  int order_;
  SphereSampling grid_;
  std::vector<int> rows_;
  bool underdetermined_ = false;
  Eigen::MatrixXd kernel_;
  Eigen::HouseholderQR<Eigen::MatrixXd> qr_;
  Eigen::MatrixXd r_;
  Eigen::MatrixXd g_hat_;
  Eigen::MatrixXd grid_basis_;
};

inline FodfSolution msmt_csd_fit(const Eigen::VectorXd& signal, const GradientTable& table,
                                 const ResponseFunctions& resp, int order = kFodfOrder) {
  return MsmtCsd(resp, table, std::nullopt, order).fit(signal);
}

// ---------------------------------------------------------------------------
// Peak extraction

struct Peak {
  Eigen::Vector3d direction;
  double amplitude = 0.0;
};

/// Angle in degrees between two axes (antipodal directions are the same axis).
inline double axis_angle_deg(const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
  const double c = std::min(1.0, std::abs(a.normalized().dot(b.normalized())));
  return std::acos(c) * 180.0 / kPi;
}

/// Local maxima of the fODF on the constraint grid, refined by pattern search
/// on the sphere and merged when closer than `min_separation_deg`.
inline std::vector<Peak> find_peaks(const ShCoefficients& fodf, double rel_threshold = 0.1,
                                    double min_separation_deg = 5.0) {
  static const SphereSampling grid = sample_sphere(kConstraintGridSize);
  const Eigen::MatrixXd basis = sh_basis_matrix(grid.directions, fodf.order);
  const Eigen::VectorXd amp = basis * fodf.coeffs;
  const double peak = amp.maxCoeff();
  if (!(peak > 0.0)) return {};
  const double spacing = std::sqrt(kFourPi / double(grid.size()));  // mean point spacing, radians
  const double neighbor_cos = std::cos(1.6 * spacing);

  auto value = [&](const Eigen::Vector3d& u) { return sh_values(u, fodf.order).dot(fodf.coeffs); };

  std::vector<Peak> cands;
  for (Eigen::Index i = 0; i < grid.size(); ++i) {
    if (amp[i] < rel_threshold * peak) continue;
    const Eigen::Vector3d u = grid.directions.row(i).transpose();
    bool is_max = true;
    for (Eigen::Index j = 0; j < grid.size() && is_max; ++j) {
      if (j == i) continue;
      if (std::abs(u.dot(grid.directions.row(j).transpose())) >= neighbor_cos && amp[j] > amp[i]) is_max = false;
    }
    if (!is_max) continue;
    // Pattern search in the tangent plane.
    Eigen::Vector3d best = u;
    double best_v = amp[i];
    for (double step = spacing; step > 1e-6; step *= 0.5) {
      bool improved = true;
      while (improved) {
        improved = false;
        const Eigen::Vector3d e1 = best.unitOrthogonal();
        const Eigen::Vector3d e2 = best.cross(e1);
        for (const Eigen::Vector3d& d : {e1, Eigen::Vector3d(-e1), e2, Eigen::Vector3d(-e2)}) {
          const Eigen::Vector3d cand = (best + step * d).normalized();
          const double v = value(cand);
          if (v > best_v) {
            best_v = v;
            best = cand;
            improved = true;
          }
        }
      }
    }
    cands.push_back({best, best_v});
  }
  std::sort(cands.begin(), cands.end(), [](const Peak& a, const Peak& b) { return a.amplitude > b.amplitude; });
  std::vector<Peak> out;
  for (const auto& c : cands) {
    bool dup = false;
    for (const auto& o : out)
      if (axis_angle_deg(c.direction, o.direction) < min_separation_deg) dup = true;
    if (!dup) out.push_back(c);
  }
  return out;
}

}  // namespace msfodf
