#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace moby {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A hyper-parameter or configuration value outside its valid range.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values detected during training or optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed dataset or checkpoint bytes; carries the offending byte offset.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace moby
