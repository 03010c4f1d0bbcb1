#pragma once

#include <stdexcept>
#include <string>

namespace ccnext {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents or ranks do not agree with an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A numeric precondition (range, sign, finiteness) was violated.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unreadable file / stream.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ccnext
