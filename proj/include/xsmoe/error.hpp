#pragma once

#include <stdexcept>
#include <string>

namespace xsmoe {

// Exception hierarchy. The CLI maps each family to an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not conform to an op's rule.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Caller broke a documented precondition or a structural invariant.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input files.
class DataError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf in a loss or gradient.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace xsmoe
