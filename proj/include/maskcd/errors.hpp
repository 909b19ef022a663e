#pragma once

#include <stdexcept>
#include <string>

namespace maskcd {

// Error classes map onto CLI exit codes (see tools/maskcd.cpp).

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad configuration value, unsupported hyperparameter, or model/checkpoint mismatch.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent user input (images, datasets, shapes).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Tensor shape or usage contract violated by the caller.
class DimensionError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Structured parse failure of a persisted file.
class ParseError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace maskcd
