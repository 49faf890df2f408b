#pragma once

#include <stdexcept>
#include <string>

namespace wcnn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor dimensions do not satisfy an operation's precondition.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A configuration value is invalid or inconsistent.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An API contract was violated by the caller (wrong dtype, non-scalar loss, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Input data is malformed (unpaired files, label out of range, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A checkpoint does not match the expected manifest.
class ManifestError : public Error {
 public:
  using Error::Error;
};

/// A score is mathematically undefined (e.g. IoU of an empty confusion matrix).
class UndefinedScoreError : public Error {
 public:
  using Error::Error;
};

}  // namespace wcnn
