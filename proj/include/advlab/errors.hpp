#pragma once

#include <stdexcept>
#include <string>

namespace advlab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dimension mismatch between a model, an input, or a matrix operand.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument values (empty sets, invalid probability vectors, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A factorization hit a pivot below tolerance.
class SingularityError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of a function.
class DomainError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

/// Data is not (adversarially) linearly separable.
class SeparabilityError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace advlab
