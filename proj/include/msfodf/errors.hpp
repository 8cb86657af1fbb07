#pragma once

#include <stdexcept>
#include <string>

namespace msfodf {

/// Bad input: malformed files, violated preconditions, inconsistent shapes.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Divergence, NNLS iteration cap, non-finite gradients.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A required file (dataset, checkpoint, twin) does not exist.
class MissingArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// CLI exit codes.
enum class ExitCode : int {
  kOk = 0,
  kValidation = 2,
  kNumerical = 3,
  kMissingArtifact = 4,
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

}  // namespace detail
}  // namespace msfodf
