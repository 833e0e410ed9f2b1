#pragma once

#include <stdexcept>
#include <string>

namespace bredinger {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Argument outside the mathematical domain of an operation (non-finite
/// field entry, non-positive variance, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Parameters that are valid but numerically unusable, e.g. a kernel that
/// collapsed to a point mass.
class ConfigurationError : public Error {
 public:
  using Error::Error;
};

/// Malformed user input: grids, times, tables or config files.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A constraint set that admits no finite-entropy solution, or a potential
/// table that kills all mass from some start node.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

/// An identity that must hold for a normalized measure was violated.
class InconsistencyError : public Error {
 public:
  using Error::Error;
};

}  // namespace bredinger
