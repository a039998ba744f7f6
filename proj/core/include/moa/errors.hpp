// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace moa {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid or conflicting configuration (CLI exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Caller violated an API precondition (e.g. backward on a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

// NaN / divergence during training (CLI exit code 3).
class NumericalError : public Error {
 public:
  using Error::Error;
};

// File system failure (CLI exit code 4).
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace moa
