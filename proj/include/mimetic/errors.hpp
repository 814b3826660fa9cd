#pragma once

#include <stdexcept>
#include <string>

namespace mimetic {

// Common base for all library-raised error conditions.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape/dimension mismatch between tensors.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration (model/init/optimizer/data settings).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents (dataset binaries, snapshots).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Bad runtime input values (e.g. out-of-range labels).
class InputError : public Error {
 public:
  using Error::Error;
};

// API misuse (e.g. backward on a non-scalar).
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace mimetic
