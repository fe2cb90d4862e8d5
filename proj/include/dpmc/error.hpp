// Copyright (c) 2026 The dpmc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace dpmc {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Tensor shape or dimension mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An operation produced a NaN or Inf value.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Prune mask does not match the model's prunable parameter layout.
class MaskError : public Error {
 public:
  using Error::Error;
};

/// A step would exceed a configured hard privacy cap.
class BudgetExhaustedError : public Error {
 public:
  using Error::Error;
};

/// Noise calibration cannot reach the requested privacy target.
class CalibrationError : public Error {
 public:
  using Error::Error;
};

/// Malformed dataset file or out-of-range label.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Invalid run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace dpmc
