#pragma once

#include <stdexcept>
#include <string>

namespace lcg {

/// Base class for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A value lies outside the support or admissible range of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Non-finite input reached a numeric routine.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Caller broke a structural precondition (missing parent, wrong dims, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Operation is not defined for this distribution or graph structure.
class UnsupportedError : public Error {
 public:
  using Error::Error;
};

/// Malformed file or document. The message names the offending location.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace lcg
