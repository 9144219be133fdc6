#pragma once

#include <stdexcept>
#include <string>

namespace coa {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Bad user input: empty datasets, missing files, images too small.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Incompatible model or loss configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered during training or a degenerate numeric input.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// An operation called on an object in the wrong lifecycle state.
class StateError : public Error {
 public:
  using Error::Error;
};

}  // namespace coa
