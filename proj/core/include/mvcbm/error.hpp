#pragma once

#include <stdexcept>
#include <string>

namespace mvcbm {

// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dimension or structure mismatch between arrays, trees, or batches.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A loss, activation, or gradient became NaN or infinite.
class NonFiniteError : public Error {
 public:
  NonFiniteError(std::string where, const std::string& detail)
      : Error("non-finite value in " + where + (detail.empty() ? "" : ": " + detail)),
        where_(std::move(where)) {}

  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

// Malformed, truncated, or incompatible file (checkpoint, dataset, config).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Caller supplied an argument outside the documented domain.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

}  // namespace mvcbm
