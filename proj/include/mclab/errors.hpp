// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace mclab {

/// Base class for every error raised by the library. The C API maps each
/// subclass onto one of the status codes declared in mclab.h.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Validation family (exit code 3).
class ConfigError : public Error {
 public:
  using Error::Error;
};
class ParseError : public Error {
 public:
  using Error::Error;
};
class IntegrityError : public Error {
 public:
  using Error::Error;
};
class ValidationError : public Error {
 public:
  using Error::Error;
};
class DataError : public Error {
 public:
  using Error::Error;
};

// Runtime family (exit code 4).
class DimensionError : public Error {
 public:
  using Error::Error;
};
class NumericError : public Error {
 public:
  using Error::Error;
};
class DegenerateBatchError : public Error {
 public:
  using Error::Error;
};
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mclab
