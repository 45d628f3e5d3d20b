#pragma once

#include <stdexcept>
#include <string>

namespace computer {

/// Shapes that do not conform for an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NaN/Inf produced or consumed, or a numeric threshold breached.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration, flags or arguments.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Base of all file / format problems. Messages always name the path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MissingFileError : public IoError {
 public:
  using IoError::IoError;
};

class BadMagicError : public IoError {
 public:
  using IoError::IoError;
};

class ShortReadError : public IoError {
 public:
  using IoError::IoError;
};

class ShapeMismatchError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace computer
