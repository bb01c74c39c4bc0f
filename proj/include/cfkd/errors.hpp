#pragma once

#include <stdexcept>
#include <string>

namespace cfkd {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity reached a tensor, or training diverged.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A method precondition on the data cannot be met (e.g. an empty group).
class NotApplicable : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace cfkd
