#pragma once

#include <stdexcept>
#include <string>

namespace atlasnam {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad configuration, shape mismatch, or misuse of an API contract.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or incomplete input data (CSV cells, JSON documents, missing covariates).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A value outside the mathematical domain of an operation (e.g. variance <= 0).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered during a computation, or an estimate that is inconsistent
/// beyond its sampling error.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace atlasnam
