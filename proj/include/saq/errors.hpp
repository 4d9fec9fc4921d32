#pragma once

#include <stdexcept>
#include <string>

namespace saq {

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Violated call precondition (non-scalar loss, missing gradient, ...).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Degenerate or out-of-domain numeric range.
struct RangeError : std::domain_error {
  using std::domain_error::domain_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A post-condition measured at runtime did not hold (e.g. outlier injection).
struct VerificationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace saq
