#pragma once

#include <stdexcept>
#include <string>

namespace capt {

// Base of every error raised by the library. Callers that only care about
// "something went wrong" catch this; the CLI maps subclasses to exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not agree with what an operation needs.
struct DimensionError : Error {
  using Error::Error;
};

// A documented precondition was violated by the caller.
struct ContractError : Error {
  using Error::Error;
};

// Input is geometrically or numerically degenerate (zero vector, point on an
// axis, antipodal cancellation in a vote).
struct DegenerateError : Error {
  using Error::Error;
};

// NaN or Inf appeared in a forward or backward pass.
struct NumericalFault : Error {
  using Error::Error;
};

// Filesystem or format failure. The message carries the offending path.
struct IoError : Error {
  using Error::Error;
};

// Invalid user configuration (CLI flags, config files, category names).
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace capt
