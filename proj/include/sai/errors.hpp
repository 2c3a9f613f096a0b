#pragma once

#include <stdexcept>
#include <string>

namespace sai {

inline constexpr const char* kVersion = "0.1.0";

// Design matrix is rank deficient (or a covariance is degenerate).
struct SingularDesignError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Too few rows for the requested fit.
struct InsufficientDataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Inputs have no spread; scale-based defaults are undefined.
struct DegenerateScaleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// |I_bar| below tolerance; the one-step correction is undefined.
struct DegenerateInformationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Bad CLI usage, config file, or input CSV.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace sai
