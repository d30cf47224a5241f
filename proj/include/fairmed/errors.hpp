#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fairmed {

/// Bad caller input: shapes, ranges, malformed configuration.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or truncated file. `offset` is a byte offset for binary blobs
/// and a 1-based line number for line-oriented formats.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset = 0)
      : std::runtime_error(what), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// NaN/Inf escaped a computation, or a construction loop failed to converge.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConstructionFailed : public NumericError {
 public:
  using NumericError::NumericError;
};

}  // namespace fairmed
