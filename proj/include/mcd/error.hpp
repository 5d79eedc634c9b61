#pragma once

#include <stdexcept>
#include <string>

namespace mcd {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller broke a documented precondition (shape, range, configuration).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

// Arithmetic failure detected at runtime (exact division by zero in
// verification mode, non-finite loss during training).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Misuse of a differentiation graph (backward twice, foreign nodes).
class GraphError : public Error {
 public:
  using Error::Error;
};

// File format failures. Each failure mode has its own type so callers and
// tests can tell them apart.
class FormatError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ValueRangeError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class GeometryError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Invalid experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace mcd
