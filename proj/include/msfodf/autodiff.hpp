#pragma once

// Minimal reverse-mode differentiation over dense Eigen matrices. Covers the
// operations of the estimators in learner.hpp and nothing more.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "msfodf/errors.hpp"
#include "msfodf/harmonics.hpp"

namespace msfodf::ad {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct Var {
  int id = -1;
};

/// One forward pass. Nodes are appended in evaluation order, so reverse order
/// is a valid topological order for backward().
template <class T>
class Tape {
 public:
  using M = Mat<T>;

  explicit Tape(Eigen::Index n_params = 0) : param_grad_(Vec<T>::Zero(n_params)) {}

  /// Records the sign pattern of every ReLU input (for kink detection in gradient checks).
  void record_activations(bool on) { record_ = on; }
  const std::vector<std::uint8_t>& activation_pattern() const { return pattern_; }

  const M& value(Var v) const { return nodes_.at(size_t(v.id)).value; }
  const Vec<T>& param_grad() const { return param_grad_; }
  size_t size() const { return nodes_.size(); }

  Var constant(M v) { return push(std::move(v), false, nullptr); }

  /// Column-major view of `rows x cols` parameters at `offset` of the flat vector.
  Var param(const Vec<T>& flat, Eigen::Index offset, Eigen::Index rows, Eigen::Index cols) {
    detail::require(offset + rows * cols <= flat.size(), "parameter block out of range");
    M v = Eigen::Map<const M>(flat.data() + offset, rows, cols);
    detail::require(offset + rows * cols <= param_grad_.size(), "tape gradient buffer smaller than parameter vector");
    return push(std::move(v), true, [offset](Tape& t, int self) {
      const M& g = t.nodes_[size_t(self)].grad;
      t.param_grad_.segment(offset, g.size()) += g.reshaped();
    });
  }

  Var matmul(Var a, Var b) {
    detail::require(value(a).cols() == value(b).rows(), "matmul: inner dimensions differ");
    M v = value(a) * value(b);
    return push(std::move(v), needs(a) || needs(b), [a, b](Tape& t, int self) {
      const M& g = t.grad_of(self);
      if (t.needs(a)) t.accumulate(a, g * t.value(b).transpose());
      if (t.needs(b)) t.accumulate(b, t.value(a).transpose() * g);
    });
  }

  /// a * k for a constant k that must outlive the tape.
  Var matmul_const(Var a, const M& k) {
    detail::require(value(a).cols() == k.rows(), "matmul_const: inner dimensions differ");
    M v = value(a) * k;
    const M* kp = &k;
    return push(std::move(v), needs(a), [a, kp](Tape& t, int self) { t.accumulate(a, t.grad_of(self) * kp->transpose()); });
  }

  /// Applies the constant k to each of `blocks` equal column blocks of a.
  Var block_matmul_const(Var a, const M& k, int blocks) {
    const M& x = value(a);
    detail::require(x.cols() == blocks * k.rows(), "block_matmul_const: column count mismatch");
    M v(x.rows(), blocks * k.cols());
    for (int c = 0; c < blocks; ++c) v.middleCols(c * k.cols(), k.cols()).noalias() = x.middleCols(c * k.rows(), k.rows()) * k;
    const M* kp = &k;
    return push(std::move(v), needs(a), [a, kp, blocks](Tape& t, int self) {
      const M& g = t.grad_of(self);
      M d(g.rows(), blocks * kp->rows());
      for (int c = 0; c < blocks; ++c)
        d.middleCols(c * kp->rows(), kp->rows()).noalias() = g.middleCols(c * kp->cols(), kp->cols()) * kp->transpose();
      t.accumulate(a, d);
    });
  }

  Var add(Var a, Var b) {
    detail::require(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(), "add: shape mismatch");
    M v = value(a) + value(b);
    return push(std::move(v), needs(a) || needs(b), [a, b](Tape& t, int self) {
      t.accumulate(a, t.grad_of(self));
      t.accumulate(b, t.grad_of(self));
    });
  }

  /// a + 1 * row, broadcasting a 1 x n row over every row of a.
  Var add_row(Var a, Var row) {
    detail::require(value(row).size() == value(a).cols(), "add_row: width mismatch");
    M v = value(a);
    v.rowwise() += value(row).reshaped().transpose();
    return push(std::move(v), needs(a) || needs(row), [a, row](Tape& t, int self) {
      const M& g = t.grad_of(self);
      t.accumulate(a, g);
      if (t.needs(row)) {
        M s = g.colwise().sum();
        s.resize(t.value(row).rows(), t.value(row).cols());
        t.accumulate(row, s);
      }
    });
  }

  /// a with b added into columns [col0, col0 + b.cols()).
  Var add_into_cols(Var a, Var b, Eigen::Index col0) {
    detail::require(value(a).rows() == value(b).rows() && col0 + value(b).cols() <= value(a).cols(),
                    "add_into_cols: shape mismatch");
    M v = value(a);
    v.middleCols(col0, value(b).cols()) += value(b);
    return push(std::move(v), needs(a) || needs(b), [a, b, col0](Tape& t, int self) {
      const M& g = t.grad_of(self);
      t.accumulate(a, g);
      if (t.needs(b)) t.accumulate(b, M(g.middleCols(col0, t.value(b).cols())));
    });
  }

  Var relu(Var a) {
    const M& x = value(a);
    if (record_)
      for (Eigen::Index i = 0; i < x.size(); ++i) pattern_.push_back(x.data()[i] > T(0) ? 1 : 0);
    M v = x.cwiseMax(T(0));
    return push(std::move(v), needs(a), [a](Tape& t, int self) {
      t.accumulate(a, M(t.grad_of(self).array() * (t.value(a).array() > T(0)).template cast<T>()));
    });
  }

  Var square(Var a) {
    M v = value(a).array().square();
    return push(std::move(v), needs(a), [a](Tape& t, int self) {
      t.accumulate(a, M(T(2) * t.value(a).array() * t.grad_of(self).array()));
    });
  }

  /// sqrt(a + eps), elementwise; a must be non-negative.
  Var sqrt_eps(Var a, T eps) {
    M v = (value(a).array() + eps).sqrt();
    return push(std::move(v), needs(a), [a](Tape& t, int self) {
      t.accumulate(a, M(t.grad_of(self).array() / (T(2) * t.value(Var{self}).array())));
    });
  }

  /// Column-major reshape of entries [offset, offset + rows * cols) of a.
  Var slice(Var a, Eigen::Index offset, Eigen::Index rows, Eigen::Index cols) {
    const M& x = value(a);
    detail::require(offset + rows * cols <= x.size(), "slice out of range");
    M v = Eigen::Map<const M>(x.data() + offset, rows, cols);
    return push(std::move(v), needs(a), [a, offset](Tape& t, int self) {
      const M& g = t.grad_of(self);
      M d = M::Zero(t.value(a).rows(), t.value(a).cols());
      d.reshaped().segment(offset, g.size()) = g.reshaped();
      t.accumulate(a, d);
    });
  }

  /// Zonal spherical convolution of channel-major SH rows:
  /// y[:, co, lm] = sum_ci sqrt(4 pi / (2l + 1)) h[ci, co, l] x[:, ci, lm],
  /// with h flattened as ((ci * cout + co) * n_degrees + l / 2).
  Var zonal_conv(Var x, Var h, int cin, int cout, int order) {
    const int nc = sh_count(order), nl = order / 2 + 1;
    const M& xv = value(x);
    detail::require(xv.cols() == cin * nc, "zonal_conv: input has " + std::to_string(xv.cols()) + " columns, expected " +
                                               std::to_string(cin * nc));
    detail::require(value(h).size() == cin * cout * nl, "zonal_conv: kernel size mismatch");
    const Vec<T> scale = degree_scale(order);
    const Vec<T> hv = value(h).reshaped();
    M v = M::Zero(xv.rows(), cout * nc);
    for (int ci = 0; ci < cin; ++ci)
      for (int co = 0; co < cout; ++co)
        for (int l = 0; l <= order; l += 2) {
          const T w = scale[l / 2] * hv[(ci * cout + co) * nl + l / 2];
          const int off = sh_degree_offset(l);
          v.middleCols(co * nc + off, 2 * l + 1) += w * xv.middleCols(ci * nc + off, 2 * l + 1);
        }
    return push(std::move(v), needs(x) || needs(h), [x, h, cin, cout, order](Tape& t, int self) {
      const int nc2 = sh_count(order), nl2 = order / 2 + 1;
      const M& g = t.grad_of(self);
      const M& xv2 = t.value(x);
      const Vec<T> s = degree_scale(order);
      const Vec<T> hv2 = t.value(h).reshaped();
      M dx = M::Zero(xv2.rows(), xv2.cols());
      M dh = M::Zero(t.value(h).rows(), t.value(h).cols());
      for (int ci = 0; ci < cin; ++ci)
        for (int co = 0; co < cout; ++co)
          for (int l = 0; l <= order; l += 2) {
            const int k = (ci * cout + co) * nl2 + l / 2;
            const int off = sh_degree_offset(l);
            const auto gb = g.middleCols(co * nc2 + off, 2 * l + 1);
            const auto xb = xv2.middleCols(ci * nc2 + off, 2 * l + 1);
            dx.middleCols(ci * nc2 + off, 2 * l + 1) += (s[l / 2] * hv2[k]) * gb;
            dh.reshaped()[k] += s[l / 2] * (gb.array() * xb.array()).sum();
          }
      t.accumulate(x, dx);
      t.accumulate(h, dh);
    });
  }

  /// Adds b[c] to the degree-0 coefficient of each channel c (blocks of `ncoef` columns).
  Var add_channel_bias(Var x, Var b, int ncoef) {
    const M& xv = value(x);
    const Eigen::Index nch = value(b).size();
    detail::require(xv.cols() == nch * ncoef, "add_channel_bias: shape mismatch");
    M v = xv;
    for (Eigen::Index c = 0; c < nch; ++c) v.col(c * ncoef).array() += value(b).reshaped()[c];
    return push(std::move(v), needs(x) || needs(b), [x, b, ncoef](Tape& t, int self) {
      const M& g = t.grad_of(self);
      t.accumulate(x, g);
      if (t.needs(b)) {
        M db(t.value(b).rows(), t.value(b).cols());
        for (Eigen::Index c = 0; c < db.size(); ++c) db.reshaped()[c] = g.col(c * ncoef).sum();
        t.accumulate(b, db);
      }
    });
  }

  /// Batch mean of w_a * mean((p - y)^2 over the first n_a columns) + w_b * mean(over the rest).
  Var weighted_mse(Var pred, const M& target, Eigen::Index n_a, T w_a, T w_b) {
    const M& p = value(pred);
    detail::require(p.rows() == target.rows() && p.cols() == target.cols(), "loss: prediction/target shape mismatch");
    detail::require(n_a > 0 && n_a < p.cols(), "loss: invalid split");
    const Eigen::Index n_b = p.cols() - n_a;
    const M d = p - target;
    const T rows = T(p.rows());
    const T loss = (w_a * d.leftCols(n_a).squaredNorm() / T(n_a) + w_b * d.rightCols(n_b).squaredNorm() / T(n_b)) / rows;
    M v(1, 1);
    v(0, 0) = loss;
    return push(std::move(v), needs(pred), [pred, d, n_a, n_b, w_a, w_b, rows](Tape& t, int self) {
      const T g = t.grad_of(self)(0, 0);
      M dp(d.rows(), d.cols());
      dp.leftCols(n_a) = (g * T(2) * w_a / (T(n_a) * rows)) * d.leftCols(n_a);
      dp.rightCols(n_b) = (g * T(2) * w_b / (T(n_b) * rows)) * d.rightCols(n_b);
      t.accumulate(pred, dp);
    });
  }

  /// Reverse sweep from a 1 x 1 node; parameter gradients land in param_grad().
  void backward(Var loss) {
    detail::require(!nodes_.empty(), "backward on an empty tape");
    detail::require(value(loss).size() == 1, "backward needs a scalar output");
    nodes_[size_t(loss.id)].grad = M::Ones(1, 1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (n.back && n.grad.size() > 0) n.back(*this, i);
    }
  }

  static Vec<T> degree_scale(int order) {
    Vec<T> s(order / 2 + 1);
    for (int l = 0; l <= order; l += 2) s[l / 2] = T(std::sqrt(kFourPi / (2.0 * l + 1.0)));
    return s;
  }

 private:
  struct Node {
    M value;
    M grad;
    bool needs_grad = false;
    std::function<void(Tape&, int)> back;
  };

  Var push(M v, bool needs_grad, std::function<void(Tape&, int)> back) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs_grad;
    if (needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return {int(nodes_.size()) - 1};
  }

  bool needs(Var v) const { return nodes_[size_t(v.id)].needs_grad; }
  const M& grad_of(int id) const { return nodes_[size_t(id)].grad; }

  template <class Expr>
  void accumulate(Var v, const Expr& g) {
    Node& n = nodes_[size_t(v.id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  std::vector<Node> nodes_;
  Vec<T> param_grad_;
  bool record_ = false;
  std::vector<std::uint8_t> pattern_;
};

}  // namespace msfodf::ad
