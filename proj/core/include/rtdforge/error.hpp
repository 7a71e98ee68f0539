#pragma once

#include <stdexcept>
#include <string>

namespace rtdforge {

// Base of every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not agree for an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// An id or index lies outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

// A precondition on an argument value does not hold.
class ValueError : public Error {
 public:
  using Error::Error;
};

// A NaN or Inf was produced where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or incompatible configuration. Carries the offending key and the
// line it came from when known (line 0 means "not from a file").
class ConfigError : public Error {
 public:
  ConfigError(const std::string& message, std::string key = {}, int line = 0)
      : Error(message), key_(std::move(key)), line_(line) {}

  const std::string& key() const noexcept { return key_; }
  int line() const noexcept { return line_; }

 private:
  std::string key_;
  int line_;
};

// Unreadable, truncated or semantically invalid data files.
class DataError : public Error {
 public:
  DataError(const std::string& message, int line = 0)
      : Error(message), line_(line) {}

  int line() const noexcept { return line_; }

 private:
  int line_;
};

}  // namespace rtdforge
