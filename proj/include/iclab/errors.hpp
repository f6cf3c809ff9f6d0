#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace iclab {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Operand shapes are incompatible (matmul inner dims, conv channels, ...).
class ShapeError : public Error {
public:
  explicit ShapeError(const std::string& what) : Error(what) {}
};

/// A scalar argument is outside its documented domain.
class ValueError : public Error {
public:
  explicit ValueError(const std::string& what) : Error(what) {}
};

/// A probability mass function failed validation.
class DistributionError : public Error {
public:
  explicit DistributionError(const std::string& what) : Error(what) {}
};

/// An API was called out of protocol (e.g. backward before forward).
class UsageError : public Error {
public:
  explicit UsageError(const std::string& what) : Error(what) {}
};

/// Training-mode batch statistics need at least two samples.
class BatchTooSmallError : public ValueError {
public:
  explicit BatchTooSmallError(const std::string& what) : ValueError(what) {}
};

/// A network spec violates one of its invariants.
class SpecError : public Error {
public:
  explicit SpecError(const std::string& what) : Error(what) {}
};

/// Bad run configuration (unknown key, missing file, out-of-range value).
class ConfigError : public Error {
public:
  explicit ConfigError(const std::string& what) : Error(what) {}
};

/// Malformed data file; carries the byte offset where parsing failed.
class FormatError : public Error {
public:
  FormatError(const std::string& what, std::size_t byte_offset)
      : Error(what + " (byte offset " + std::to_string(byte_offset) + ")"),
        offset(byte_offset) {}
  std::size_t offset;
};

/// Gradient descent diverged; names the offending configuration.
class DivergenceError : public Error {
public:
  explicit DivergenceError(const std::string& what) : Error(what) {}
};

}  // namespace iclab
