// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace ermoe {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape or size mismatch between operands.
class DimensionError : public Error {
public:
  using Error::Error;
};

/// Invalid parameter value (temperature, k > E, ...).
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Violated operation precondition (non-normalized attention row, empty batch, ...).
class ContractError : public Error {
public:
  using Error::Error;
};

/// Malformed file content (bad magic, truncated payload, hash mismatch).
class FormatError : public Error {
public:
  using Error::Error;
};

/// Numerical factorization failure (rank deficiency).
class FactorizationError : public Error {
public:
  using Error::Error;
};

/// Failure during an optimization run (non-finite gradient, halted training).
class TrainingError : public Error {
public:
  using Error::Error;
};

/// Degenerate post-hoc calibration fit.
class CalibrationError : public Error {
public:
  using Error::Error;
};

}  // namespace ermoe
