// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace convstyle {

/// Base of every error raised by the library. `exit_code()` is the stable
/// process exit status the command-line tool maps the error to.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

// Input validation (exit 2).
class ParseError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class ValidationError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class IoError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

// Config / shape mismatch (exit 3).
class DimensionError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

class MissingModalityError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

class CapacityError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

// Numeric failure (exit 4).
class NumericError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

}  // namespace convstyle
