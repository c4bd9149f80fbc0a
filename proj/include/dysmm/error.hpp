#pragma once

#include <stdexcept>
#include <string>

namespace dysmm {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An operation produced NaN or Inf.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unsupported file (WAV, feature cache, checkpoint, manifest).
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A dataset, split, or probability table violates a documented invariant.
class InvariantError : public Error {
 public:
  using Error::Error;
};

}  // namespace dysmm
