#pragma once

#include <stdexcept>
#include <string>

namespace stm3 {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes do not line up for the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An argument is outside the domain an operation accepts.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity was produced.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition on tensor values was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class RoutingError : public Error {
 public:
  using Error::Error;
};

}  // namespace stm3
