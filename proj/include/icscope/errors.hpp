#pragma once

#include <stdexcept>
#include <string>

namespace icscope {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration, arguments, or file contents. Maps to CLI exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Vector or matrix shapes that do not fit the network or CAV they are used with.
class DimensionError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Divergence, non-finite values, or a solver that failed to converge. Maps to exit code 3.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Input data carries no information to fit on (e.g. all activations identical).
class DegenerateInputError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

namespace detail {

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ConfigError(message);
}

inline void require_dims(bool condition, const std::string& message) {
  if (!condition) throw DimensionError(message);
}

}  // namespace detail
}  // namespace icscope
