#pragma once

#include <stdexcept>
#include <string>

namespace mcm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or segment layouts that do not line up.
class StructuralError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced, or probabilities that do not normalize.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an operation precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or unknown key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated file. Carries the byte offset of the failure.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Filesystem failures (missing inputs, unwritable outputs).
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mcm
