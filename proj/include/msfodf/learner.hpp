#pragma once

// Trainable fODF estimators: per-configuration FCN, all-configuration FCN,
// dynamic-head FCNs on SHORE or per-shell SH input, and the dynamic-head
// spherical CNN.

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "msfodf/autodiff.hpp"
#include "msfodf/errors.hpp"
#include "msfodf/harmonics.hpp"
#include "msfodf/phantom.hpp"
#include "msfodf/qspace.hpp"
#include "msfodf/shore.hpp"

namespace msfodf {

enum class Variant { kFcnSingle, kFcnAll, kDhShore, kDhSh, kDhSc };

inline constexpr std::array<int, 4> kTrunkWidths{400, 48, 200, 48};
inline constexpr int kOutputWidth = kTargetWidth;  // 45 fODF + 3 VF
inline constexpr int kDhHidden = 64;
inline constexpr int kConv0Channels = 8;
inline constexpr int kConv1Channels = 16;
inline constexpr int kReluGridSize = 724;
inline constexpr int kShoreInputOrder = 6;
inline constexpr double kSpectrumEps = 1e-6;

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kFcnSingle: return "fcn-single";
    case Variant::kFcnAll: return "fcn-all";
    case Variant::kDhShore: return "dh-shore";
    case Variant::kDhSh: return "dh-sh";
    case Variant::kDhSc: return "dh-sc";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::kFcnSingle, Variant::kFcnAll, Variant::kDhShore, Variant::kDhSh, Variant::kDhSc})
    if (variant_name(v) == s) return v;
  throw ValidationError("unknown variant '" + s + "' (expected fcn-single, fcn-all, dh-shore, dh-sh or dh-sc)");
}

inline bool uses_dynamic_head(Variant v) { return v == Variant::kDhShore || v == Variant::kDhSh || v == Variant::kDhSc; }
inline bool uses_shore_input(Variant v) { return v == Variant::kFcnSingle || v == Variant::kDhShore; }

inline int input_width(Variant v, int num_shells) {
  return uses_shore_input(v) ? shore_count(kShoreInputOrder) : num_shells * kFodfCoeffs;
}

/// Parameter count of the layer the dynamic head generates.
inline int first_layer_size(Variant v, int num_shells) {
  if (v == Variant::kDhSc) return num_shells * kConv0Channels * (kFodfOrder / 2 + 1) + kConv0Channels;
  return input_width(v, num_shells) * kTrunkWidths[0] + kTrunkWidths[0];
}

// ---------------------------------------------------------------------------
// Parameter layout

struct ParamBlock {
  std::string name;
  Eigen::Index offset = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index size() const { return rows * cols; }
};

struct ParamLayout {
  std::vector<ParamBlock> blocks;
  Eigen::Index total = 0;

  void add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    blocks.push_back({name, total, rows, cols});
    total += rows * cols;
  }
  const ParamBlock& at(const std::string& name) const {
    for (const auto& b : blocks)
      if (b.name == name) return b;
    throw ValidationError("no parameter block '" + name + "'");
  }
  bool has(const std::string& name) const {
    for (const auto& b : blocks)
      if (b.name == name) return true;
    return false;
  }
};

inline ParamLayout make_layout(Variant v, int num_shells) {
  detail::require(num_shells >= 1, "need at least one shell");
  ParamLayout l;
  int trunk_in = input_width(v, num_shells);
  if (uses_dynamic_head(v)) {
    const int p = first_layer_size(v, num_shells);
    l.add("dh.w0", num_shells, kDhHidden);
    l.add("dh.b0", 1, kDhHidden);
    l.add("dh.w1", kDhHidden, p);
    l.add("dh.b1", 1, p);
  }
  if (v == Variant::kDhSc) {
    const int nl = kFodfOrder / 2 + 1;
    l.add("conv1.h", 1, kConv0Channels * kConv1Channels * nl);
    l.add("conv1.b", 1, kConv1Channels);
    l.add("readout.h", 1, kConv1Channels * nl);
    trunk_in = kConv1Channels * nl;
    l.add("dense0.w", trunk_in, kTrunkWidths[0]);
    l.add("dense0.b", 1, kTrunkWidths[0]);
  } else if (!uses_dynamic_head(v)) {
    l.add("dense0.w", trunk_in, kTrunkWidths[0]);
    l.add("dense0.b", 1, kTrunkWidths[0]);
  }
  for (int i = 1; i < int(kTrunkWidths.size()); ++i) {
    l.add("dense" + std::to_string(i) + ".w", kTrunkWidths[i - 1], kTrunkWidths[i]);
    l.add("dense" + std::to_string(i) + ".b", 1, kTrunkWidths[i]);
  }
  return l;
}

struct EstimatorParams {
  Variant variant = Variant::kDhSc;
  int num_shells = 3;
  std::optional<ShellMask> train_mask;  // fcn-single only
  ParamLayout layout;
  Eigen::VectorXd values;
  Eigen::VectorXd input_offset;  // subtracted from raw input features
  Eigen::VectorXd input_scale;   // then multiplied
  double shore_md = kDefaultMd;
  std::uint64_t seed = 0;
  std::int64_t step = 0;

  Eigen::Index size() const { return values.size(); }
  Eigen::Map<const Eigen::MatrixXd> block(const std::string& name) const {
    const auto& b = layout.at(name);
    return {values.data() + b.offset, b.rows, b.cols};
  }
  void validate() const {
    detail::require(values.size() == layout.total, "parameter count does not match layout");
    detail::require(values.allFinite(), "parameters must be finite");
    detail::require(input_scale.size() == input_width(variant, num_shells) && input_offset.size() == input_scale.size(),
                    "input normalization width mismatch");
    detail::require((variant == Variant::kFcnSingle) == train_mask.has_value(),
                    "fcn-single needs a training mask; other variants must not have one");
  }
};

namespace detail {

inline void glorot(Eigen::Ref<Eigen::VectorXd> out, Eigen::Index fan_in, Eigen::Index fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / double(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  for (auto& v : out) v = u(rng);
}

/// Zonal kernels with per-degree variance `gain / (cin * s_l^2)`, s_l the Funk-Hecke factor,
/// so every output degree keeps the input's variance scale.
inline void zonal_init(Eigen::Ref<Eigen::VectorXd> out, int cin, int cout, double gain, std::mt19937_64& rng) {
  const int nl = kFodfOrder / 2 + 1;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int ci = 0; ci < cin; ++ci)
    for (int co = 0; co < cout; ++co)
      for (int l = 0; l <= kFodfOrder; l += 2) {
        const double s2 = kFourPi / (2.0 * l + 1.0);
        out[(ci * cout + co) * nl + l / 2] = u(rng) * std::sqrt(3.0 * gain / (cin * s2));
      }
}

}  // namespace detail

/// Glorot dense weights, zero biases, variance-preserving zonal kernels. The
/// dynamic head's final bias absorbs a standard first-layer init so that its
/// output at the all-shell mask equals that init.
inline EstimatorParams init_params(Variant v, int num_shells, std::uint64_t seed,
                                   std::optional<ShellMask> train_mask = std::nullopt) {
  EstimatorParams p;
  p.variant = v;
  p.num_shells = num_shells;
  p.seed = seed;
  if (v == Variant::kFcnSingle) {
    detail::require(train_mask.has_value(), "fcn-single needs a training shell configuration");
    detail::require(train_mask->size() == num_shells && train_mask->any(), "invalid training shell configuration");
    p.train_mask = train_mask;
  } else {
    detail::require(!train_mask.has_value(), variant_name(v) + " trains on every configuration and takes no mask");
  }
  p.layout = make_layout(v, num_shells);
  p.values = Eigen::VectorXd::Zero(p.layout.total);
  p.input_scale = Eigen::VectorXd::Ones(input_width(v, num_shells));
  p.input_offset = Eigen::VectorXd::Zero(input_width(v, num_shells));
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), 0u};
  std::mt19937_64 rng(seq);
  auto seg = [&](const std::string& name) { return p.values.segment(p.layout.at(name).offset, p.layout.at(name).size()); };
  for (const auto& b : p.layout.blocks) {
    if (b.name.size() > 2 && b.name.substr(b.name.size() - 2) == ".w" && b.name.rfind("dh.", 0) != 0)
      detail::glorot(seg(b.name), b.rows, b.cols, rng);
  }
  if (v == Variant::kDhSc) {
    detail::zonal_init(seg("conv1.h"), kConv0Channels, kConv1Channels, 2.0, rng);
    detail::zonal_init(seg("readout.h"), kConv1Channels, 1, 1.0, rng);
  }
  if (uses_dynamic_head(v)) {
    const auto& w1 = p.layout.at("dh.w1");
    detail::glorot(seg("dh.w0"), num_shells, kDhHidden, rng);
    detail::glorot(seg("dh.w1"), w1.rows, w1.cols, rng);
    Eigen::VectorXd target = Eigen::VectorXd::Zero(w1.cols);
    if (v == Variant::kDhSc) {
      detail::zonal_init(target.head(num_shells * kConv0Channels * (kFodfOrder / 2 + 1)), num_shells, kConv0Channels, 2.0,
                         rng);
    } else {
      const int in = input_width(v, num_shells);
      detail::glorot(target.head(Eigen::Index(in) * kTrunkWidths[0]), in, kTrunkWidths[0], rng);
    }
    const Eigen::RowVectorXd hidden =
        (Eigen::RowVectorXd::Ones(num_shells) * p.block("dh.w0") + p.block("dh.b0")).cwiseMax(0.0);
    seg("dh.b1") = target - (hidden * p.block("dh.w1")).transpose();
  }
  return p;
}

// ---------------------------------------------------------------------------
// Input features

/// Builds network inputs from raw signals: b0 normalization, then per-shell
/// order-8 SH (absent shells zero) or a SHORE fit restricted to present shells.
class FeatureBuilder {
 public:
  explicit FeatureBuilder(const GradientTable& table, double md = kDefaultMd, double sh_reg = kDefaultLaplaceReg)
      : table_(std::make_shared<const GradientTable>(table)), scale_(compute_zeta(md)) {
    detail::require(!table.b0_indices().empty(), "gradient table needs b0 measurements for normalization");
    for (int k = 0; k < table.num_shells(); ++k) shell_fitters_.emplace_back(table.shell_directions(k), kFodfOrder, sh_reg);
    for (const auto& m : enumerate_configs(table.num_shells())) {
      try {
        shore_.emplace(m.str(), ShoreFitter(table, scale_, kShoreInputOrder, m));
      } catch (const ValidationError&) {
        // Too few rows for this configuration; reported on use.
      }
    }
  }

  int num_shells() const { return table_->num_shells(); }
  const GradientTable& table() const { return *table_; }
  std::shared_ptr<const GradientTable> table_ptr() const { return table_; }
  double md() const { return scale_.md; }

  /// Channel-major per-shell SH of the b0-normalized signal; absent shells are zero.
  Eigen::VectorXd sh_features(const Eigen::VectorXd& signal, const ShellMask& mask) const {
    const Eigen::VectorXd s = normalize_by_b0(mask_values(signal, *table_, mask), *table_);
    Eigen::VectorXd out = Eigen::VectorXd::Zero(Eigen::Index(num_shells()) * kFodfCoeffs);
    for (int k = 0; k < num_shells(); ++k) {
      if (!mask[k]) continue;
      const auto& idx = table_->shell_indices(k);
      Eigen::VectorXd v(Eigen::Index(idx.size()));
      for (size_t i = 0; i < idx.size(); ++i) v[Eigen::Index(i)] = s[idx[i]];
      out.segment(Eigen::Index(k) * kFodfCoeffs, kFodfCoeffs) = shell_fitters_[size_t(k)].fit(v).coeffs;
    }
    return out;
  }

  Eigen::VectorXd shore_features(const Eigen::VectorXd& signal, const ShellMask& mask) const {
    const auto it = shore_.find(mask.str());
    if (it == shore_.end()) {
      check_mask(mask, *table_);
      throw ValidationError("SHORE input unavailable for configuration " + mask.str() + " (too few measurements)");
    }
    return it->second.fit(normalize_by_b0(mask_values(signal, *table_, mask), *table_)).coeffs.coeffs;
  }

  Eigen::VectorXd features(Variant v, const Eigen::VectorXd& signal, const ShellMask& mask) const {
    check_mask(mask, *table_);
    return uses_shore_input(v) ? shore_features(signal, mask) : sh_features(signal, mask);
  }

  /// [n_rows x width] raw features of dataset rows under one configuration.
  Eigen::MatrixXd features(Variant v, const FloatMatrix& signals, const ShellMask& mask) const {
    detail::require(signals.cols() == table_->size(), "signal width does not match the gradient table");
    Eigen::MatrixXd out(signals.rows(), input_width(v, num_shells()));
    for (Eigen::Index r = 0; r < signals.rows(); ++r)
      out.row(r) = features(v, Eigen::VectorXd(signals.row(r).cast<double>().transpose()), mask).transpose();
    return out;
  }

 private:
  std::shared_ptr<const GradientTable> table_;
  ShoreScale scale_;
  std::vector<ShFitter> shell_fitters_;
  std::map<std::string, ShoreFitter> shore_;
};

/// Input normalization from training features. SHORE inputs are standardized per
/// feature. SH inputs center and standardize only the degree-0 coefficient of each
/// shell and divide the rest by their RMS; the spherical CNN shares that RMS over
/// each (shell, degree) so the normalization commutes with rotations.
inline void fit_input_normalization(EstimatorParams& p, const Eigen::MatrixXd& rows) {
  detail::require(rows.rows() >= 1 && rows.cols() == input_width(p.variant, p.num_shells),
                  "normalization needs training features of the model's input width");
  const Eigen::VectorXd mean = rows.colwise().mean().transpose();
  const Eigen::VectorXd ms = rows.array().square().colwise().mean().transpose();
  const Eigen::VectorXd var = (ms.array() - mean.array().square()).cwiseMax(0.0);
  auto inv = [](double v) { return v > 1e-24 ? 1.0 / std::sqrt(v) : 1.0; };
  const Eigen::Index w = rows.cols();
  p.input_offset = Eigen::VectorXd::Zero(w);
  p.input_scale = Eigen::VectorXd::Ones(w);
  if (uses_shore_input(p.variant)) {
    p.input_offset = mean;
    for (Eigen::Index i = 0; i < w; ++i) p.input_scale[i] = inv(var[i]);
    return;
  }
  for (int k = 0; k < p.num_shells; ++k) {
    const Eigen::Index base = Eigen::Index(k) * kFodfCoeffs;
    p.input_offset[base] = mean[base];
    p.input_scale[base] = inv(var[base]);
    for (int l = 2; l <= kFodfOrder; l += 2) {
      const Eigen::Index off = base + sh_degree_offset(l);
      if (p.variant == Variant::kDhSc) {
        p.input_scale.segment(off, 2 * l + 1).setConstant(inv(ms.segment(off, 2 * l + 1).mean()));
      } else {
        for (Eigen::Index i = off; i < off + 2 * l + 1; ++i) p.input_scale[i] = inv(ms[i]);
      }
    }
  }
}

/// (raw - offset) * scale; channels of absent shells stay zero for SH inputs.
inline Eigen::MatrixXd normalize_inputs(const EstimatorParams& p, const Eigen::MatrixXd& raw, const ShellMask& mask) {
  detail::require(raw.cols() == p.input_scale.size(), "input has " + std::to_string(raw.cols()) +
                                                          " features, model expects " +
                                                          std::to_string(p.input_scale.size()));
  Eigen::MatrixXd x = (raw.rowwise() - p.input_offset.transpose()) * p.input_scale.asDiagonal();
  if (!uses_shore_input(p.variant))
    for (int k = 0; k < p.num_shells; ++k)
      if (!mask[k]) x.middleCols(Eigen::Index(k) * kFodfCoeffs, kFodfCoeffs).setZero();
  return x;
}

// ---------------------------------------------------------------------------
// Forward pass

template <class T>
struct ScnnConstants {
  ad::Mat<T> to_grid;    // 45 x 724: coefficients -> grid values
  ad::Mat<T> from_grid;  // 724 x 45: quadrature projection
  ad::Mat<T> spectrum;   // (16 * 45) x (16 * 5): per-channel sums over degrees l >= 2
  ad::Mat<T> degree0;    // (16 * 45) x (16 * 5): copies each channel's l = 0 coefficient

  static const ScnnConstants& get() {
    static const ScnnConstants c = [] {
      ScnnConstants k;
      const SphereSampling q = exact_quadrature(kReluGridSize, 2 * kFodfOrder);
      const Eigen::MatrixXd b = sh_basis_matrix(q.directions, kFodfOrder);
      k.to_grid = b.transpose().cast<T>();
      k.from_grid = (q.weights.asDiagonal() * b).cast<T>();
      const int nl = kFodfOrder / 2 + 1;
      k.spectrum = ad::Mat<T>::Zero(kConv1Channels * kFodfCoeffs, kConv1Channels * nl);
      k.degree0 = k.spectrum;
      for (int c = 0; c < kConv1Channels; ++c) {
        k.degree0(c * kFodfCoeffs, c * nl) = T(1);
        for (int j = 1; j < kFodfCoeffs; ++j) k.spectrum(c * kFodfCoeffs + j, c * nl + sh_degrees(kFodfOrder)[j] / 2) = T(1);
      }
      return k;
    }();
    return c;
  }
};

struct ForwardTaps {
  ad::Var first_block;  // dynamic-head output (DH variants)
  ad::Var spectrum;     // power-spectrum features (dh-sc)
};

/// Records one batch forward pass. `x` holds scaled features, one row per voxel.
/// Returns the [batch x 48] output node.
template <class T>
ad::Var forward(ad::Tape<T>& tape, const ParamLayout& layout, const ad::Vec<T>& theta, Variant v, int num_shells,
                const ad::Mat<T>& x, const ShellMask& mask, ForwardTaps* taps = nullptr) {
  detail::require(mask.size() == num_shells, "shell mask length " + std::to_string(mask.size()) +
                                                 " does not match the model's " + std::to_string(num_shells) + " shells");
  detail::require(mask.any(), "shell mask has no shell set");
  detail::require(x.cols() == input_width(v, num_shells), "input has " + std::to_string(x.cols()) +
                                                              " features, model expects " +
                                                              std::to_string(input_width(v, num_shells)));
  auto param = [&](const std::string& name) {
    const auto& b = layout.at(name);
    return tape.param(theta, b.offset, b.rows, b.cols);
  };
  auto dense = [&](ad::Var in, ad::Var w, ad::Var b) { return tape.add_row(tape.matmul(in, w), b); };

  ad::Var generated{};
  if (uses_dynamic_head(v)) {
    ad::Mat<T> code(1, num_shells);
    for (int k = 0; k < num_shells; ++k) code(0, k) = mask[k] ? T(1) : T(0);
    const ad::Var hidden = tape.relu(dense(tape.constant(code), param("dh.w0"), param("dh.b0")));
    generated = dense(hidden, param("dh.w1"), param("dh.b1"));
    if (taps) taps->first_block = generated;
  }

  const ad::Var in = tape.constant(x);
  ad::Var h{};
  ad::Var readout{};
  if (v == Variant::kDhSc) {
    const auto& k = ScnnConstants<T>::get();
    const int nk = num_shells * kConv0Channels * (kFodfOrder / 2 + 1);
    ad::Var y = tape.zonal_conv(in, tape.slice(generated, 0, 1, nk), num_shells, kConv0Channels, kFodfOrder);
    y = tape.add_channel_bias(y, tape.slice(generated, nk, 1, kConv0Channels), kFodfCoeffs);
    y = tape.block_matmul_const(tape.relu(tape.block_matmul_const(y, k.to_grid, kConv0Channels)), k.from_grid,
                                kConv0Channels);
    y = tape.zonal_conv(y, param("conv1.h"), kConv0Channels, kConv1Channels, kFodfOrder);
    y = tape.add_channel_bias(y, param("conv1.b"), kFodfCoeffs);
    const ad::Var spec = tape.add(tape.sqrt_eps(tape.matmul_const(tape.square(y), k.spectrum), T(kSpectrumEps)),
                                  tape.matmul_const(y, k.degree0));
    if (taps) taps->spectrum = spec;
    readout = tape.zonal_conv(y, param("readout.h"), kConv1Channels, 1, kFodfOrder);
    h = tape.relu(dense(spec, param("dense0.w"), param("dense0.b")));
  } else if (uses_dynamic_head(v)) {
    const Eigen::Index nin = x.cols();
    const ad::Var w0 = tape.slice(generated, 0, nin, kTrunkWidths[0]);
    const ad::Var b0 = tape.slice(generated, nin * kTrunkWidths[0], 1, kTrunkWidths[0]);
    h = tape.relu(dense(in, w0, b0));
  } else {
    h = tape.relu(dense(in, param("dense0.w"), param("dense0.b")));
  }
  h = tape.relu(dense(h, param("dense1.w"), param("dense1.b")));
  h = tape.relu(dense(h, param("dense2.w"), param("dense2.b")));
  ad::Var out = dense(h, param("dense3.w"), param("dense3.b"));
  if (v == Variant::kDhSc) out = tape.add_into_cols(out, readout, 0);
  return out;
}

/// Tape-free forward of a non-DH variant on normalized input.
inline Eigen::VectorXd fcn_forward(const Eigen::VectorXd& input, const EstimatorParams& p) {
  detail::require(!uses_dynamic_head(p.variant), "fcn_forward needs a non-DH variant");
  detail::require(input.size() == input_width(p.variant, p.num_shells),
                  "input length " + std::to_string(input.size()) + " != " +
                      std::to_string(input_width(p.variant, p.num_shells)));
  Eigen::RowVectorXd h = input.transpose();
  for (int i = 0; i < int(kTrunkWidths.size()); ++i) {
    const std::string n = "dense" + std::to_string(i);
    h = h * p.block(n + ".w") + p.block(n + ".b");
    if (i + 1 < int(kTrunkWidths.size())) h = h.cwiseMax(0.0);
  }
  return h.transpose();
}

/// First-layer parameter block generated for `mask`.
inline Eigen::VectorXd dynamic_head_generate(const ShellMask& mask, const EstimatorParams& p) {
  detail::require(uses_dynamic_head(p.variant), variant_name(p.variant) + " has no dynamic head");
  detail::require(mask.size() == p.num_shells, "mask length does not match the model");
  detail::require(mask.any(), "shell mask has no shell set");
  Eigen::RowVectorXd code(p.num_shells);
  for (int k = 0; k < p.num_shells; ++k) code[k] = mask[k] ? 1.0 : 0.0;
  const Eigen::RowVectorXd hidden = (code * p.block("dh.w0") + p.block("dh.b0")).cwiseMax(0.0);
  return (hidden * p.block("dh.w1") + p.block("dh.b1")).transpose();
}

/// Rows of raw features of the given shape-compatible batch, scaled and forwarded in double precision.
inline Eigen::MatrixXd forward_batch(const EstimatorParams& p, const Eigen::MatrixXd& raw, const ShellMask& mask,
                                     Eigen::MatrixXd* spectrum = nullptr) {
  ad::Tape<double> tape(p.size());
  const Eigen::MatrixXd x = normalize_inputs(p, raw, mask);
  ForwardTaps taps;
  const auto out = forward<double>(tape, p.layout, p.values, p.variant, p.num_shells, x, mask, &taps);
  if (spectrum) {
    detail::require(p.variant == Variant::kDhSc, "power-spectrum features exist only for dh-sc");
    *spectrum = tape.value(taps.spectrum);
  }
  return tape.value(out);
}

// ---------------------------------------------------------------------------
// Loss, optimizer, configuration

inline double loss_mse(const Eigen::VectorXd& pred, const VoxelTarget& target, double w_fodf, double w_vf) {
  detail::require(w_fodf >= 0.0 && w_vf >= 0.0, "loss weights must be non-negative");
  detail::require(pred.size() == kOutputWidth, "prediction must have 48 entries");
  const Eigen::VectorXd y = target.concat();
  detail::require(y.size() == kOutputWidth, "target must have 48 entries");
  return w_fodf * (pred.head(kFodfCoeffs) - y.head(kFodfCoeffs)).squaredNorm() / kFodfCoeffs +
         w_vf * (pred.tail(3) - y.tail(3)).squaredNorm() / 3.0;
}

struct TrainConfig {
  double lr = 1e-3;
  int batch_size = 128;
  int epochs = 30;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double w_fodf = 1.0;
  double w_vf = 1.0;
  std::vector<double> mask_weights;  // per enumerate_configs entry; empty means uniform
  bool single_precision = true;
  std::string lr_schedule = "constant";  // or "cosine": lr * (1 + cos(pi * step / total)) / 2
  std::uint64_t seed = 0;

  /// Learning rate for optimizer step `step` (1-based) out of `total`.
  double lr_at(std::int64_t step, std::int64_t total) const {
    if (lr_schedule == "constant" || total <= 0) return lr;
    return 0.5 * lr * (1.0 + std::cos(std::numbers::pi * double(step - 1) / double(total)));
  }

  void validate() const {
    detail::require(lr > 0.0 && std::isfinite(lr), "learning rate must be positive");
    detail::require(batch_size >= 1, "batch size must be at least 1");
    detail::require(epochs >= 0, "epochs must be non-negative");
    detail::require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "Adam moments must lie in [0, 1)");
    detail::require(eps > 0.0, "Adam epsilon must be positive");
    detail::require(w_fodf >= 0.0 && w_vf >= 0.0, "loss weights must be non-negative");
    detail::require(w_fodf > 0.0 || w_vf > 0.0, "loss weights must not both be zero");
    for (double w : mask_weights) detail::require(w >= 0.0 && std::isfinite(w), "mask weights must be non-negative");
    detail::require(lr_schedule == "constant" || lr_schedule == "cosine", "lr_schedule must be constant or cosine");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},         {"batch_size", c.batch_size},
          {"epochs", c.epochs}, {"beta1", c.beta1},
          {"beta2", c.beta2},   {"eps", c.eps},
          {"w_fodf", c.w_fodf}, {"w_vf", c.w_vf},
          {"mask_weights", c.mask_weights}, {"single_precision", c.single_precision},
          {"lr_schedule", c.lr_schedule}, {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  try {
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.w_fodf = j.value("w_fodf", c.w_fodf);
    c.w_vf = j.value("w_vf", c.w_vf);
    c.mask_weights = j.value("mask_weights", c.mask_weights);
    c.single_precision = j.value("single_precision", c.single_precision);
    c.lr_schedule = j.value("lr_schedule", c.lr_schedule);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid train config: ") + e.what());
  }
  c.validate();
  return c;
}

template <class T>
struct AdamState {
  ad::Vec<T> m, v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update. Aborts on non-finite gradients.
template <class T>
void adam_step(ad::Vec<T>& params, const ad::Vec<T>& grads, AdamState<T>& s, const TrainConfig& c,
               std::optional<double> lr = std::nullopt) {
  detail::require(params.size() == grads.size(), "parameter/gradient size mismatch");
  if (!grads.allFinite()) {
    Eigen::Index bad = 0;
    while (bad < grads.size() && std::isfinite(double(grads[bad]))) ++bad;
    throw NumericalError("non-finite gradient at parameter " + std::to_string(bad) + " (step " +
                         std::to_string(s.step + 1) + ")");
  }
  if (s.m.size() != params.size()) {
    s.m = ad::Vec<T>::Zero(params.size());
    s.v = ad::Vec<T>::Zero(params.size());
  }
  ++s.step;
  const T b1 = T(c.beta1), b2 = T(c.beta2);
  s.m = b1 * s.m + (T(1) - b1) * grads;
  s.v = b2 * s.v + (T(1) - b2) * grads.cwiseAbs2();
  const T c1 = T(1) / (T(1) - T(std::pow(c.beta1, double(s.step))));
  const T c2 = T(1) / (T(1) - T(std::pow(c.beta2, double(s.step))));
  params.array() -= T(lr.value_or(c.lr)) * (s.m.array() * c1) / ((s.v.array() * c2).sqrt() + T(c.eps));
}

/// Draws one configuration per batch from enumerate_configs(K) with the given weights.
class MaskSampler {
 public:
  MaskSampler(int num_shells, const std::vector<double>& weights, std::uint64_t seed)
      : masks_(enumerate_configs(num_shells)) {
    std::vector<double> w = weights.empty() ? std::vector<double>(masks_.size(), 1.0) : weights;
    detail::require(w.size() == masks_.size(), "mask_weights needs " + std::to_string(masks_.size()) + " entries");
    double s = 0.0;
    for (double x : w) s += x;
    detail::require(s > 0.0, "mask weights sum to zero");
    cdf_.resize(w.size());
    double acc = 0.0;
    for (size_t i = 0; i < w.size(); ++i) cdf_[i] = (acc += w[i] / s);
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), 2u};
    rng_.seed(seq);
  }

  int next_index() {
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
    for (size_t i = 0; i < cdf_.size(); ++i)
      if (u < cdf_[i]) return int(i);
    return int(cdf_.size()) - 1;
  }
  const ShellMask& next() { return masks_[size_t(next_index())]; }
  const std::vector<ShellMask>& masks() const { return masks_; }

 private:
  std::vector<ShellMask> masks_;
  std::vector<double> cdf_;
  std::mt19937_64 rng_;
};

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  EstimatorParams params;
  std::vector<EpochRecord> trace;
  std::vector<int> config_counts;  // batches per enumerate_configs entry
};

namespace detail {

/// Per-configuration feature matrices for one dataset.
struct FeatureTable {
  std::vector<ShellMask> masks;
  std::vector<Eigen::MatrixXd> raw;  // per mask [n x width]
  Eigen::MatrixXd targets;

  const Eigen::MatrixXd& for_mask(const ShellMask& m) const {
    for (size_t i = 0; i < masks.size(); ++i)
      if (masks[i] == m) return raw[i];
    throw ValidationError("no features for configuration " + m.str());
  }
};

inline FeatureTable build_feature_table(const FeatureBuilder& fb, Variant v, const VoxelDataset& ds,
                                        const std::vector<ShellMask>& masks) {
  FeatureTable t;
  t.masks = masks;
  t.targets = ds.targets.cast<double>();
  if (uses_shore_input(v)) {
    for (const auto& m : masks) t.raw.push_back(fb.features(v, ds.signals, m));
  } else {
    // Per-shell SH is linear per shell: masking zeroes whole channels.
    const Eigen::MatrixXd all = fb.features(v, ds.signals, ShellMask::all(fb.num_shells()));
    for (const auto& m : masks) {
      Eigen::MatrixXd r = all;
      for (int k = 0; k < fb.num_shells(); ++k)
        if (!m[k]) r.middleCols(Eigen::Index(k) * kFodfCoeffs, kFodfCoeffs).setZero();
      t.raw.push_back(std::move(r));
    }
  }
  return t;
}

template <class T>
ad::Mat<T> gather_rows(const Eigen::MatrixXd& m, const std::vector<Eigen::Index>& rows, size_t begin, size_t end) {
  ad::Mat<T> out(Eigen::Index(end - begin), m.cols());
  for (size_t i = begin; i < end; ++i) out.row(Eigen::Index(i - begin)) = m.row(rows[i]).template cast<T>();
  return out;
}

template <class T>
TrainResult train_impl(const FeatureTable& tr, const FeatureTable* val, EstimatorParams params,
                       const std::vector<ShellMask>& train_masks, const TrainConfig& cfg, const std::string& progress) {
  const int K = params.num_shells;
  const Variant v = params.variant;
  ad::Vec<T> theta = params.values.cast<T>();
  AdamState<T> adam;
  const std::vector<ShellMask> all = enumerate_configs(K);
  std::vector<double> weights = cfg.mask_weights;
  if (train_masks.size() == 1) {
    weights.assign(all.size(), 0.0);
    for (size_t i = 0; i < all.size(); ++i)
      if (all[i] == train_masks[0]) weights[i] = 1.0;
  }
  MaskSampler sampler(K, weights, cfg.seed);
  std::seed_seq shuffle_seq{std::uint32_t(cfg.seed), std::uint32_t(cfg.seed >> 32), 1u};
  std::mt19937_64 shuffle_rng(shuffle_seq);
  MaskSampler eval_sampler(K, weights, cfg.seed ^ 0x9e3779b97f4a7c15ull);

  const Eigen::Index n = tr.targets.rows();
  std::vector<Eigen::Index> order(static_cast<size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[size_t(i)] = i;
  const size_t bs = size_t(cfg.batch_size);
  const std::int64_t total_steps = std::int64_t(cfg.epochs) * std::int64_t((size_t(n) + bs - 1) / bs);

  auto batch_loss = [&](const FeatureTable& ft, const std::vector<Eigen::Index>& rows, size_t b, size_t e,
                        const ShellMask& m, bool train_step) {
    ad::Tape<T> tape(theta.size());
    const ad::Mat<T> x = gather_rows<T>(ft.for_mask(m), rows, b, e);
    const ad::Mat<T> y = gather_rows<T>(ft.targets, rows, b, e);
    const auto out = forward<T>(tape, params.layout, theta, v, K, x, m);
    const auto loss = tape.weighted_mse(out, y, kFodfCoeffs, T(cfg.w_fodf), T(cfg.w_vf));
    const double value = double(tape.value(loss)(0, 0));
    if (!std::isfinite(value)) throw NumericalError("non-finite loss at step " + std::to_string(adam.step + 1));
    if (train_step) {
      tape.backward(loss);
      adam_step(theta, tape.param_grad(), adam, cfg, cfg.lr_at(adam.step + 1, total_steps));
    }
    return value;
  };
  auto val_loss = [&]() {
    if (!val) return std::numeric_limits<double>::quiet_NaN();
    const Eigen::Index nv = val->targets.rows();
    std::vector<Eigen::Index> rows(static_cast<size_t>(nv));
    for (Eigen::Index i = 0; i < nv; ++i) rows[size_t(i)] = i;
    double s = 0.0;
    Eigen::Index count = 0;
    size_t bi = 0;
    for (size_t b = 0; b < size_t(nv); b += bs, ++bi) {
      const size_t e = std::min(size_t(nv), b + bs);
      s += batch_loss(*val, rows, b, e, train_masks[bi % train_masks.size()], false) * double(e - b);
      count += Eigen::Index(e - b);
    }
    return s / double(count);
  };

  TrainResult res;
  res.config_counts.assign(all.size(), 0);
  {
    double s = 0.0;
    for (size_t b = 0; b < size_t(n); b += bs) {
      const size_t e = std::min(size_t(n), b + bs);
      s += batch_loss(tr, order, b, e, eval_sampler.next(), false) * double(e - b);
    }
    res.trace.push_back({0, s / double(n), val_loss()});
  }
  const double initial = res.trace.front().train_loss;
  int diverging = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double s = 0.0;
    for (size_t b = 0; b < size_t(n); b += bs) {
      const size_t e = std::min(size_t(n), b + bs);
      const int mi = sampler.next_index();
      ++res.config_counts[size_t(mi)];
      s += batch_loss(tr, order, b, e, sampler.masks()[size_t(mi)], true) * double(e - b);
    }
    const double epoch_loss = s / double(n);
    res.trace.push_back({epoch, epoch_loss, val_loss()});
    if (!progress.empty())
      std::fprintf(stderr, "[%s] epoch %d train %.6g val %.6g\n", progress.c_str(), epoch, epoch_loss,
                   res.trace.back().val_loss);
    diverging = epoch_loss > 1e3 * initial ? diverging + 1 : 0;
    if (diverging >= 3)
      throw NumericalError("training diverged: loss " + std::to_string(epoch_loss) + " exceeds 1000x initial " +
                           std::to_string(initial) + " for 3 epochs");
  }
  params.values = theta.template cast<double>();
  params.step = adam.step;
  res.params = std::move(params);
  return res;
}

}  // namespace detail

/// Trains `v` on `train_ds`. fcn-single trains on `single_mask` only; every other
/// variant draws one configuration per batch from the configured distribution.
inline TrainResult train(const VoxelDataset& train_ds, const VoxelDataset* val_ds, Variant v, const TrainConfig& cfg,
                         std::optional<ShellMask> single_mask = std::nullopt, const std::string& progress = "",
                         double md = kDefaultMd) {
  cfg.validate();
  train_ds.validate();
  detail::require(train_ds.n_voxels() >= 1, "training set is empty");
  const int K = train_ds.table.num_shells();
  if (v == Variant::kFcnSingle) {
    detail::require(single_mask.has_value(), "fcn-single needs --mask (its training configuration)");
    check_mask(*single_mask, train_ds.table);
  } else {
    detail::require(!single_mask.has_value(), variant_name(v) + " trains over all configurations; no mask allowed");
  }
  const std::vector<ShellMask> masks = single_mask ? std::vector<ShellMask>{*single_mask} : enumerate_configs(K);
  if (!single_mask && !cfg.mask_weights.empty())
    detail::require(cfg.mask_weights.size() == masks.size(), "mask_weights needs one entry per configuration");

  const FeatureBuilder fb(train_ds.table, md);
  auto tr = detail::build_feature_table(fb, v, train_ds, masks);
  std::optional<detail::FeatureTable> va;
  if (val_ds) {
    val_ds->validate();
    detail::require(val_ds->table.size() == train_ds.table.size(), "validation table differs from training table");
    va = detail::build_feature_table(fb, v, *val_ds, masks);
  }

  EstimatorParams p = init_params(v, K, cfg.seed, single_mask);
  p.shore_md = md;
  Eigen::MatrixXd stacked(0, input_width(v, K));
  if (uses_shore_input(v)) {
    for (const auto& r : tr.raw) {
      Eigen::MatrixXd s(stacked.rows() + r.rows(), r.cols());
      s << stacked, r;
      stacked = std::move(s);
    }
  } else {
    stacked = fb.features(v, train_ds.signals, ShellMask::all(K));
  }
  fit_input_normalization(p, stacked);
  for (size_t i = 0; i < masks.size(); ++i) {
    tr.raw[i] = normalize_inputs(p, tr.raw[i], masks[i]);
    if (va) va->raw[i] = normalize_inputs(p, va->raw[i], masks[i]);
  }

  return cfg.single_precision ? detail::train_impl<float>(tr, va ? &*va : nullptr, std::move(p), masks, cfg, progress)
                              : detail::train_impl<double>(tr, va ? &*va : nullptr, std::move(p), masks, cfg, progress);
}

// ---------------------------------------------------------------------------
// Prediction

/// Clamps the fractions to [0, 1] and renormalizes them to sum to one.
inline VoxelTarget finalize_prediction(const Eigen::VectorXd& raw) {
  detail::require(raw.size() == kOutputWidth, "prediction must have 48 entries");
  VoxelTarget t{ShCoefficients(kFodfOrder, raw.head(kFodfCoeffs)), raw.tail(3).cwiseMax(0.0).cwiseMin(1.0)};
  const double s = t.vf.sum();
  t.vf = s > 0.0 ? Eigen::Vector3d(t.vf / s) : Eigen::Vector3d::Constant(1.0 / 3.0);
  return t;
}

inline VoxelTarget predict(const EstimatorParams& p, const Eigen::VectorXd& signal, const GradientTable& table,
                           const ShellMask& mask) {
  detail::require(mask.size() == p.num_shells, "mask has " + std::to_string(mask.size()) + " shells, model expects " +
                                                   std::to_string(p.num_shells));
  const FeatureBuilder fb(table, p.shore_md);
  const Eigen::VectorXd raw = fb.features(p.variant, signal, mask);
  return finalize_prediction(forward_batch(p, raw.transpose(), mask).row(0).transpose());
}

/// [n x 48] raw outputs for every voxel of `signals` under `mask`.
inline Eigen::MatrixXd predict_raw(const EstimatorParams& p, const FeatureBuilder& fb, const FloatMatrix& signals,
                                   const ShellMask& mask, Eigen::Index chunk = 256) {
  detail::require(mask.size() == p.num_shells, "mask has " + std::to_string(mask.size()) + " shells, model expects " +
                                                   std::to_string(p.num_shells));
  const Eigen::MatrixXd raw = fb.features(p.variant, signals, mask);
  Eigen::MatrixXd out(raw.rows(), kOutputWidth);
  for (Eigen::Index b = 0; b < raw.rows(); b += chunk) {
    const Eigen::Index e = std::min(raw.rows(), b + chunk);
    out.middleRows(b, e - b) = forward_batch(p, raw.middleRows(b, e - b), mask);
  }
  return out;
}

/// predict_raw followed by finalize_prediction on every row.
inline Eigen::MatrixXd predict_dataset(const EstimatorParams& p, const FeatureBuilder& fb, const FloatMatrix& signals,
                                       const ShellMask& mask) {
  Eigen::MatrixXd out = predict_raw(p, fb, signals, mask);
  for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) = finalize_prediction(out.row(r).transpose()).concat().transpose();
  return out;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradProbe {
  std::string block;
  Eigen::Index index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

/// Central finite differences against the tape gradient in double precision.
/// Probes are spread over parameter blocks; a probe whose +-h perturbation flips
/// any ReLU is redrawn.
inline std::vector<GradProbe> gradcheck(Variant v, std::uint64_t seed, int n_probes = 10, double h = 1e-5,
                                        int n_voxels = 3) {
  const GradientTable table = make_scheme();
  PhantomConfig pc;
  const VoxelDataset ds = gen_dataset(n_voxels, table, pc, seed).scan;
  const ShellMask mask = v == Variant::kFcnSingle ? ShellMask::all(table.num_shells()) : ShellMask::parse("101");
  EstimatorParams p = init_params(v, table.num_shells(), seed,
                                  v == Variant::kFcnSingle ? std::optional<ShellMask>(mask) : std::nullopt);
  const FeatureBuilder fb(table);
  const Eigen::MatrixXd raw = fb.features(v, ds.signals, mask);
  fit_input_normalization(p, fb.features(v, ds.signals, ShellMask::all(table.num_shells())));
  const Eigen::MatrixXd x = normalize_inputs(p, raw, mask);
  const Eigen::MatrixXd y = ds.targets.cast<double>();

  auto eval = [&](const Eigen::VectorXd& theta, std::vector<std::uint8_t>* pattern, Eigen::VectorXd* grad) {
    ad::Tape<double> tape(theta.size());
    tape.record_activations(pattern != nullptr);
    const auto out = forward<double>(tape, p.layout, theta, v, p.num_shells, x, mask);
    const auto loss = tape.weighted_mse(out, y, kFodfCoeffs, 1.0, 1.0);
    if (grad) {
      tape.backward(loss);
      *grad = tape.param_grad();
    }
    if (pattern) *pattern = tape.activation_pattern();
    return tape.value(loss)(0, 0);
  };

  Eigen::VectorXd grad;
  std::vector<std::uint8_t> base;
  eval(p.values, &base, &grad);
  std::mt19937_64 rng(seed ^ 0x5bd1e995ull);
  std::vector<GradProbe> probes;
  for (int i = 0; i < n_probes; ++i) {
    const auto& blk = p.layout.blocks[size_t(i) % p.layout.blocks.size()];
    GradProbe pr;
    bool ok = false;
    for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
      const Eigen::Index idx = blk.offset + std::uniform_int_distribution<Eigen::Index>(0, blk.size() - 1)(rng);
      if (attempt < 100 && std::abs(grad[idx]) < 1e-12) continue;  // prefer live parameters
      Eigen::VectorXd tp = p.values, tm = p.values;
      tp[idx] += h;
      tm[idx] -= h;
      std::vector<std::uint8_t> pp, pm;
      const double fp = eval(tp, &pp, nullptr);
      const double fm = eval(tm, &pm, nullptr);
      if (pp != base || pm != base) continue;
      pr = {blk.name, idx, grad[idx], (fp - fm) / (2.0 * h), 0.0};
      pr.rel_error = std::abs(pr.analytic - pr.numeric) / std::max(std::abs(pr.analytic), 1e-8);
      ok = true;
    }
    if (!ok) throw NumericalError("gradient check: no kink-free probe in block " + blk.name);
    probes.push_back(pr);
  }
  return probes;
}

// ---------------------------------------------------------------------------
// Checkpoints and loss traces

inline constexpr int kCheckpointVersion = 1;

/// One JSON header line, then the parameters as little-endian float64.
inline void save_checkpoint(const EstimatorParams& p, const std::filesystem::path& path,
                            const nlohmann::json& config = nlohmann::json::object()) {
  p.validate();
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : p.layout.blocks) blocks.push_back({{"name", b.name}, {"rows", b.rows}, {"cols", b.cols}});
  nlohmann::json header{{"format", "msfodf-checkpoint"},
                        {"version", kCheckpointVersion},
                        {"variant", variant_name(p.variant)},
                        {"num_shells", p.num_shells},
                        {"train_mask", p.train_mask ? nlohmann::json(p.train_mask->str()) : nlohmann::json(nullptr)},
                        {"blocks", blocks},
                        {"n_params", p.values.size()},
                        {"input_offset", std::vector<double>(p.input_offset.data(), p.input_offset.data() + p.input_offset.size())},
                        {"input_scale", std::vector<double>(p.input_scale.data(), p.input_scale.data() + p.input_scale.size())},
                        {"shore_md", p.shore_md},
                        {"seed", p.seed},
                        {"step", p.step},
                        {"config", config}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << header.dump() << '\n';
  detail::write_le(out, p.values.data(), size_t(p.values.size()));
  if (!out) throw ValidationError("write failed for " + path.string());
}

inline EstimatorParams load_checkpoint(const std::filesystem::path& path, nlohmann::json* config = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("missing checkpoint " + path.string());
  std::string line;
  std::getline(in, line);
  EstimatorParams p;
  try {
    const auto h = nlohmann::json::parse(line);
    detail::require(h.at("format") == "msfodf-checkpoint", "not a checkpoint file");
    detail::require(h.at("version").get<int>() == kCheckpointVersion, "unsupported checkpoint version");
    p.variant = parse_variant(h.at("variant").get<std::string>());
    p.num_shells = h.at("num_shells").get<int>();
    if (!h.at("train_mask").is_null()) p.train_mask = ShellMask::parse(h.at("train_mask").get<std::string>());
    p.layout = make_layout(p.variant, p.num_shells);
    const auto& blocks = h.at("blocks");
    detail::require(blocks.size() == p.layout.blocks.size(), "checkpoint block list does not match the variant");
    for (size_t i = 0; i < blocks.size(); ++i) {
      const auto& b = p.layout.blocks[i];
      detail::require(blocks[i].at("name") == b.name && blocks[i].at("rows").get<Eigen::Index>() == b.rows &&
                          blocks[i].at("cols").get<Eigen::Index>() == b.cols,
                      "checkpoint block '" + b.name + "' has unexpected shape");
    }
    detail::require(h.at("n_params").get<Eigen::Index>() == p.layout.total, "checkpoint parameter count mismatch");
    const auto sc = h.at("input_scale").get<std::vector<double>>();
    p.input_scale = Eigen::Map<const Eigen::VectorXd>(sc.data(), Eigen::Index(sc.size()));
    const auto off = h.at("input_offset").get<std::vector<double>>();
    p.input_offset = Eigen::Map<const Eigen::VectorXd>(off.data(), Eigen::Index(off.size()));
    p.shore_md = h.at("shore_md").get<double>();
    p.seed = h.at("seed").get<std::uint64_t>();
    p.step = h.at("step").get<std::int64_t>();
    if (config) *config = h.at("config");
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  p.values.resize(p.layout.total);
  detail::read_le(in, p.values.data(), size_t(p.values.size()));
  if (!in) throw ValidationError("checkpoint payload truncated: " + path.string());
  if (in.peek() != std::char_traits<char>::eof()) throw ValidationError("checkpoint payload too long: " + path.string());
  p.validate();
  return p;
}

inline std::string format_loss_trace(const std::vector<EpochRecord>& trace) {
  std::string s = "epoch,train_loss,val_loss\n";
  char buf[96];
  for (const auto& r : trace) {
    if (std::isnan(r.val_loss))
      std::snprintf(buf, sizeof buf, "%d,%.9g,\n", r.epoch, r.train_loss);
    else
      std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g\n", r.epoch, r.train_loss, r.val_loss);
    s += buf;
  }
  return s;
}

}  // namespace msfodf
