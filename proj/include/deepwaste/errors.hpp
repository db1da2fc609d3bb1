#pragma once

#include <stdexcept>
#include <string>

namespace deepwaste {

// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor or parameter shapes that do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Bad magic, unsupported version or malformed document.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Well-formed input whose content disagrees with what it claims to be.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class TruncationError : public Error {
 public:
  using Error::Error;
};

class DecodeError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// A metric that has no value for the given input (e.g. AP with no positives).
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

// A dataset operation that conflicts with the current store contents.
class ConflictError : public Error {
 public:
  using Error::Error;
};

}  // namespace deepwaste
