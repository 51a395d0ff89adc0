#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cnl {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor or layer shapes that do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced during a forward or backward pass. layer() is -1 when the
// failure is not tied to a specific layer (e.g. the loss itself).
class NumericError : public Error {
 public:
  NumericError(const std::string& what, int layer) : Error(what), layer_(layer) {}
  int layer() const { return layer_; }

 private:
  int layer_;
};

class UnsupportedArchitecture : public Error {
 public:
  using Error::Error;
};

// Malformed on-disk data: IDX files, checkpoints, cached datasets.
class FormatError : public Error {
 public:
  enum class Kind { Magic, Version, Truncated, Corrupt };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class AggregationError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

}  // namespace cnl
