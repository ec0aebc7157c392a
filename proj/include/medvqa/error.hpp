#pragma once

#include <stdexcept>
#include <string>

namespace medvqa {

// Base class for every error raised by the library. The CLI maps these to
// exit code 2; argument problems are reported separately as usage errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input text (record files, synonym tables, JSON).
class ParseError : public Error {
 public:
  using Error::Error;
};

// Inconsistent or invalid configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Tensor or raster with unexpected dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Weight archive or checkpoint cannot be applied to a model.
class LoadError : public Error {
 public:
  using Error::Error;
};

// Dataset content problems (missing images, too few samples).
class DataError : public Error {
 public:
  using Error::Error;
};

// Index outside its valid range (for example a target class).
class RangeError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss during optimisation.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace medvqa
