// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mpl {

// Base class for all recoverable errors raised by this library.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible tensor shapes (messages name both shapes).
struct ShapeError : Error {
  using Error::Error;
};

// NaN/Inf where finite values are required, or other numeric breakdown.
struct NumericError : Error {
  using Error::Error;
};

// A caller violated a documented precondition.
struct ContractError : Error {
  using Error::Error;
};

// Token id or index outside its valid range.
struct IndexError : Error {
  using Error::Error;
};

// Unrecognized file magic/version.
struct FormatError : Error {
  using Error::Error;
};

// Structurally valid file with inconsistent or truncated contents.
struct CorruptionError : Error {
  using Error::Error;
};

}  // namespace mpl
