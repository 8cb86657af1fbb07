#pragma once

// Gradient tables, shell masks and the on-disk voxel dataset format.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "msfodf/errors.hpp"
#include "msfodf/harmonics.hpp"

namespace msfodf {

/// Shell id given to b~0 measurements.
inline constexpr int kB0Shell = -1;
inline const std::vector<double> kDefaultNominalBvalues{1000.0, 2000.0, 3000.0};
inline constexpr double kDefaultShellTolerance = 100.0;
inline constexpr double kDefaultB0Threshold = 50.0;

class GradientTable {
 public:
  GradientTable() = default;

  /// Normalizes directions and assigns each measurement to the nearest nominal b-value.
  /// Only nominal values that actually occur become shells, in ascending nominal order.
  static GradientTable from_measurements(const Directions& raw_dirs, const Eigen::VectorXd& bvals,
                                         const std::vector<double>& nominal = kDefaultNominalBvalues,
                                         double tolerance = kDefaultShellTolerance,
                                         double b0_threshold = kDefaultB0Threshold) {
    detail::require(raw_dirs.rows() == bvals.size(), "direction count " + std::to_string(raw_dirs.rows()) +
                                                         " != b-value count " + std::to_string(bvals.size()));
    detail::require(tolerance > 0.0, "shell tolerance must be positive");
    const Eigen::Index n = bvals.size();
    std::vector<int> nominal_of(n, kB0Shell);
    std::vector<bool> used(nominal.size(), false);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double b = bvals[i];
      detail::require(std::isfinite(b) && b >= 0.0, "b-value " + std::to_string(i) + " is negative or not finite");
      if (b <= b0_threshold) continue;
      int best = -1;
      double best_d = tolerance;
      for (size_t k = 0; k < nominal.size(); ++k) {
        const double d = std::abs(b - nominal[k]);
        if (d <= best_d) {
          best_d = d;
          best = int(k);
        }
      }
      if (best < 0)
        throw ValidationError("b-value " + std::to_string(b) + " at measurement " + std::to_string(i) +
                              " is not within " + std::to_string(tolerance) + " of any nominal shell");
      nominal_of[i] = best;
      used[best] = true;
    }

    GradientTable t;
    std::vector<int> remap(nominal.size(), -1);
    for (size_t k = 0; k < nominal.size(); ++k) {
      if (!used[k]) continue;
      remap[k] = int(t.nominal_.size());
      t.nominal_.push_back(nominal[k]);
    }
    t.dirs_.resize(n, 3);
    t.bvals_ = bvals;
    t.shell_ids_.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Vector3d d = raw_dirs.row(i).transpose();
      const double norm = d.norm();
      if (nominal_of[i] == kB0Shell) {
        t.shell_ids_[i] = kB0Shell;
        t.dirs_.row(i) = norm > 0.0 ? Eigen::RowVector3d((d / norm).transpose()) : Eigen::RowVector3d::Zero();
        continue;
      }
      if (!(norm > 0.0) || !std::isfinite(norm))
        throw ValidationError("measurement " + std::to_string(i) + " has zero-norm direction at b=" +
                              std::to_string(bvals[i]));
      t.dirs_.row(i) = (d / norm).transpose();
      t.shell_ids_[i] = remap[nominal_of[i]];
    }
    t.index_shells();
    return t;
  }

  Eigen::Index size() const { return bvals_.size(); }
  int num_shells() const { return int(nominal_.size()); }
  const Directions& directions() const { return dirs_; }
  const Eigen::VectorXd& bvalues() const { return bvals_; }
  const std::vector<int>& shell_ids() const { return shell_ids_; }
  const std::vector<double>& nominal_bvalues() const { return nominal_; }
  bool is_b0(Eigen::Index i) const { return shell_ids_[i] == kB0Shell; }
  const std::vector<int>& b0_indices() const { return b0_; }
  const std::vector<int>& shell_indices(int k) const { return shells_.at(k); }

  /// Directions of one shell, in measurement order.
  Directions shell_directions(int k) const {
    const auto& idx = shell_indices(k);
    Directions d(idx.size(), 3);
    for (size_t j = 0; j < idx.size(); ++j) d.row(j) = dirs_.row(idx[j]);
    return d;
  }

  /// Copy with every direction mapped u -> R u (b-values unchanged).
  GradientTable rotated(const Eigen::Matrix3d& rot) const {
    GradientTable t = *this;
    t.dirs_ = dirs_ * rot.transpose();
    return t;
  }

 private:
  void index_shells() {
    shells_.assign(nominal_.size(), {});
    b0_.clear();
    for (int i = 0; i < int(shell_ids_.size()); ++i) {
      if (shell_ids_[i] == kB0Shell)
        b0_.push_back(i);
      else
        shells_[shell_ids_[i]].push_back(i);
    }
  }

  Directions dirs_;
  Eigen::VectorXd bvals_;
  std::vector<int> shell_ids_;
  std::vector<double> nominal_;
  std::vector<std::vector<int>> shells_;
  std::vector<int> b0_;
};

namespace detail {

inline std::vector<double> parse_number_row(const std::string& line, const std::string& what) {
  std::vector<double> out;
  std::istringstream in(line);
  std::string tok;
  while (in >> tok) {
    size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size()) throw ValidationError("non-numeric token '" + tok + "' in " + what);
    out.push_back(v);
  }
  return out;
}

inline std::vector<std::string> nonempty_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (line.find_first_not_of(" \t\r") != std::string::npos) lines.push_back(line);
  return lines;
}

}  // namespace detail

/// FSL bval/bvec text: one row of N b-values; three rows (x, y, z) of N components.
inline GradientTable parse_bval_bvec(const std::string& bval_text, const std::string& bvec_text,
                                     double shell_tolerance = kDefaultShellTolerance,
                                     const std::vector<double>& nominal = kDefaultNominalBvalues) {
  const auto bl = detail::nonempty_lines(bval_text);
  detail::require(bl.size() == 1, "bval must contain exactly one row, found " + std::to_string(bl.size()));
  const auto b = detail::parse_number_row(bl[0], "bval");
  const auto vl = detail::nonempty_lines(bvec_text);
  detail::require(vl.size() == 3, "bvec must contain exactly three rows, found " + std::to_string(vl.size()));
  Directions dirs(b.size(), 3);
  for (int r = 0; r < 3; ++r) {
    const auto row = detail::parse_number_row(vl[r], "bvec");
    detail::require(row.size() == b.size(), "bvec row " + std::to_string(r) + " has " + std::to_string(row.size()) +
                                                " entries, bval has " + std::to_string(b.size()));
    for (size_t i = 0; i < row.size(); ++i) dirs(Eigen::Index(i), r) = row[i];
  }
  return GradientTable::from_measurements(dirs, Eigen::Map<const Eigen::VectorXd>(b.data(), Eigen::Index(b.size())),
                                          nominal, shell_tolerance);
}

/// Inverse of parse_bval_bvec: {bval text, bvec text}.
inline std::pair<std::string, std::string> format_bval_bvec(const GradientTable& t) {
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  std::string bval, bvec;
  for (Eigen::Index i = 0; i < t.size(); ++i) bval += (i ? " " : "") + num(t.bvalues()[i]);
  bval += "\n";
  for (int r = 0; r < 3; ++r) {
    for (Eigen::Index i = 0; i < t.size(); ++i) bvec += (i ? " " : "") + num(t.directions()(i, r));
    bvec += "\n";
  }
  return {bval, bvec};
}

/// K binary shell-presence flags. Bit k refers to GradientTable shell k.
struct ShellMask {
  std::vector<std::uint8_t> bits;

  ShellMask() = default;
  explicit ShellMask(std::vector<std::uint8_t> b) : bits(std::move(b)) {
    for (auto v : bits) detail::require(v == 0 || v == 1, "shell mask bits must be 0 or 1");
  }

  static ShellMask all(int k) { return ShellMask(std::vector<std::uint8_t>(k, 1)); }

  /// Parses a bitstring such as "110".
  static ShellMask parse(const std::string& s) {
    std::vector<std::uint8_t> b;
    for (char c : s) {
      detail::require(c == '0' || c == '1', "shell mask must be a bitstring, got '" + s + "'");
      b.push_back(std::uint8_t(c - '0'));
    }
    detail::require(!b.empty(), "empty shell mask");
    return ShellMask(std::move(b));
  }

  int size() const { return int(bits.size()); }
  bool operator[](int k) const { return bits[k] != 0; }
  int count() const {
    int c = 0;
    for (auto v : bits) c += v;
    return c;
  }
  bool any() const { return count() > 0; }
  std::string str() const {
    std::string s;
    for (auto v : bits) s += char('0' + v);
    return s;
  }
  bool operator==(const ShellMask&) const = default;
  auto operator<=>(const ShellMask& o) const { return str() <=> o.str(); }
};

/// All non-zero masks of length K in lexicographic bitstring order (001, 010, ..., 111).
inline std::vector<ShellMask> enumerate_configs(int k) {
  detail::require(k >= 1, "need at least one shell");
  detail::require(k <= 20, "too many shells to enumerate");
  std::vector<ShellMask> out;
  for (std::uint32_t code = 1; code < (1u << k); ++code) {
    std::vector<std::uint8_t> b(k);
    for (int i = 0; i < k; ++i) b[i] = std::uint8_t((code >> (k - 1 - i)) & 1u);
    out.emplace_back(std::move(b));
  }
  return out;
}

struct MaskedSignal {
  Eigen::VectorXd values;
  ShellMask mask;
  std::shared_ptr<const GradientTable> table;
};

inline void check_mask(const ShellMask& mask, const GradientTable& table) {
  if (mask.size() != table.num_shells())
    throw ValidationError("shell mask length " + std::to_string(mask.size()) + " != table shell count " +
                          std::to_string(table.num_shells()));
  detail::require(mask.any(), "shell mask has no shell set");
}

/// Zeroes the measurements of absent shells; b0 measurements are always kept.
inline Eigen::VectorXd mask_values(const Eigen::VectorXd& signal, const GradientTable& table, const ShellMask& mask) {
  detail::require(signal.size() == table.size(), "signal length " + std::to_string(signal.size()) +
                                                     " != measurement count " + std::to_string(table.size()));
  check_mask(mask, table);
  Eigen::VectorXd out = signal;
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    const int s = table.shell_ids()[i];
    if (s != kB0Shell && !mask[s]) out[i] = 0.0;
  }
  return out;
}

inline MaskedSignal apply_shell_mask(const Eigen::VectorXd& signal, std::shared_ptr<const GradientTable> table,
                                     const ShellMask& mask) {
  MaskedSignal m{mask_values(signal, *table, mask), mask, table};
  return m;
}

/// Divides by the mean of the b0 measurements. Requires at least one b0 with positive mean.
inline Eigen::VectorXd normalize_by_b0(const Eigen::VectorXd& signal, const GradientTable& table) {
  const auto& b0 = table.b0_indices();
  detail::require(!b0.empty(), "table has no b0 measurement to normalize by");
  double m = 0.0;
  for (int i : b0) m += signal[i];
  m /= double(b0.size());
  if (!(m > 0.0)) return Eigen::VectorXd::Zero(signal.size());
  return signal / m;
}

// ---------------------------------------------------------------------------
// Dataset files

inline constexpr int kDatasetVersion = 1;
inline constexpr int kTargetWidth = 48;

using FloatMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct VoxelDataset {
  FloatMatrix signals;  // n_voxels x n_measurements
  FloatMatrix targets;  // n_voxels x 48
  GradientTable table;
  std::uint64_t seed = 0;
  std::optional<double> snr;  // empty means noiseless
  std::string generator_version;
  nlohmann::json metadata = nlohmann::json::object();

  Eigen::Index n_voxels() const { return signals.rows(); }

  void validate() const {
    detail::require(signals.cols() == table.size(), "signal row length " + std::to_string(signals.cols()) +
                                                        " != measurement count " + std::to_string(table.size()));
    detail::require(targets.cols() == kTargetWidth, "target row length must be 48");
    detail::require(targets.rows() == signals.rows(), "signal and target voxel counts differ");
  }
};

namespace detail {

inline std::filesystem::path payload_path(const std::filesystem::path& sidecar) {
  auto p = sidecar;
  p.replace_extension(".bin");
  return p;
}

template <class T>
void write_le(std::ostream& os, const T* data, size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(data), std::streamsize(n * sizeof(T)));
  } else {
    for (size_t i = 0; i < n; ++i) {
      char b[sizeof(T)];
      std::memcpy(b, data + i, sizeof(T));
      std::reverse(b, b + sizeof(T));
      os.write(b, sizeof(T));
    }
  }
}

template <class T>
void read_le(std::istream& is, T* data, size_t n) {
  is.read(reinterpret_cast<char*>(data), std::streamsize(n * sizeof(T)));
  if constexpr (std::endian::native != std::endian::little) {
    for (size_t i = 0; i < n; ++i) {
      char* b = reinterpret_cast<char*>(data + i);
      std::reverse(b, b + sizeof(T));
    }
  }
}

inline nlohmann::json read_json_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw MissingArtifactError("cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("corrupt JSON in " + p.string() + ": " + e.what());
  }
}

inline nlohmann::json table_to_json(const GradientTable& t) {
  std::vector<double> b(t.bvalues().data(), t.bvalues().data() + t.size());
  std::vector<std::array<double, 3>> d(t.size());
  for (Eigen::Index i = 0; i < t.size(); ++i) d[i] = {t.directions()(i, 0), t.directions()(i, 1), t.directions()(i, 2)};
  return {{"bvals", b}, {"bvecs", d}, {"nominal_bvalues", t.nominal_bvalues()}};
}

inline GradientTable table_from_json(const nlohmann::json& j) {
  const auto b = j.at("bvals").get<std::vector<double>>();
  const auto d = j.at("bvecs").get<std::vector<std::array<double, 3>>>();
  require(b.size() == d.size(), "bvals/bvecs length mismatch in sidecar");
  Directions dirs(b.size(), 3);
  for (size_t i = 0; i < d.size(); ++i) dirs.row(Eigen::Index(i)) << d[i][0], d[i][1], d[i][2];
  const auto nominal = j.value("nominal_bvalues", kDefaultNominalBvalues);
  return GradientTable::from_measurements(dirs, Eigen::Map<const Eigen::VectorXd>(b.data(), Eigen::Index(b.size())),
                                          nominal);
}

}  // namespace detail

using detail::payload_path;

/// Writes `<path>` (JSON sidecar, extension .json) and the sibling `.bin` payload:
/// float32 little-endian, row-major, signals then targets.
inline void save_dataset(const VoxelDataset& ds, const std::filesystem::path& path) {
  ds.validate();
  nlohmann::json side{{"version", kDatasetVersion},
                      {"n_voxels", ds.signals.rows()},
                      {"n_measurements", ds.signals.cols()},
                      {"n_targets", ds.targets.cols()},
                      {"seed", ds.seed},
                      {"snr", ds.snr ? nlohmann::json(*ds.snr) : nlohmann::json(nullptr)},
                      {"generator_version", ds.generator_version},
                      {"table", detail::table_to_json(ds.table)},
                      {"metadata", ds.metadata}};
  {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write " + path.string());
    out << side.dump(2) << "\n";
  }
  std::ofstream bin(detail::payload_path(path), std::ios::binary);
  if (!bin) throw ValidationError("cannot write " + detail::payload_path(path).string());
  detail::write_le(bin, ds.signals.data(), size_t(ds.signals.size()));
  detail::write_le(bin, ds.targets.data(), size_t(ds.targets.size()));
}

inline VoxelDataset load_dataset(const std::filesystem::path& path) {
  const auto side = detail::read_json_file(path);
  VoxelDataset ds;
  long long nv = 0, nm = 0, nt = 0;
  try {
    detail::require(side.at("version").get<int>() == kDatasetVersion, "unsupported dataset version");
    nv = side.at("n_voxels").get<long long>();
    nm = side.at("n_measurements").get<long long>();
    nt = side.at("n_targets").get<long long>();
    ds.seed = side.at("seed").get<std::uint64_t>();
    if (!side.at("snr").is_null()) ds.snr = side.at("snr").get<double>();
    ds.generator_version = side.value("generator_version", "");
    ds.table = detail::table_from_json(side.at("table"));
    ds.metadata = side.value("metadata", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("corrupt dataset header " + path.string() + ": " + e.what());
  }
  detail::require(nv >= 0 && nm > 0 && nt > 0, "corrupt dataset header: non-positive dimensions");
  detail::require(nm == ds.table.size(), "sidecar n_measurements=" + std::to_string(nm) + " but table has " +
                                             std::to_string(ds.table.size()) + " entries");

  const auto bin_path = detail::payload_path(path);
  if (!std::filesystem::exists(bin_path)) throw MissingArtifactError("missing payload " + bin_path.string());
  const auto bytes = std::filesystem::file_size(bin_path);
  const auto row_bytes = std::uintmax_t(nm + nt) * sizeof(float);
  if (bytes != std::uintmax_t(nv) * row_bytes) {
    throw ValidationError("dimension mismatch: sidecar n_voxels=" + std::to_string(nv) + " but payload holds " +
                          std::to_string(bytes / row_bytes) + " voxels (" + std::to_string(bytes) + " bytes)");
  }
  ds.signals.resize(nv, nm);
  ds.targets.resize(nv, nt);
  std::ifstream bin(bin_path, std::ios::binary);
  detail::read_le(bin, ds.signals.data(), size_t(ds.signals.size()));
  detail::read_le(bin, ds.targets.data(), size_t(ds.targets.size()));
  if (!bin) throw ValidationError("short read from " + bin_path.string());
  ds.validate();
  return ds;
}

}  // namespace msfodf
