#pragma once

#include <stdexcept>
#include <string>

namespace cdiffdet {

// Base of every error raised by the library. The CLI maps ConfigError and
// ParseError to exit code 2 and everything else to exit code 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

// Violated precondition or invariant at runtime.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

class IndexError : public ContractError {
 public:
  using ContractError::ContractError;
};

// A forward op produced NaN or Inf.
class NumericError : public ContractError {
 public:
  using ContractError::ContractError;
};

// The finite-difference oracle could not produce a trustworthy answer.
class OracleError : public ContractError {
 public:
  using ContractError::ContractError;
};

}  // namespace cdiffdet
