#pragma once

#include <stdexcept>
#include <string>

namespace qens {

/// Base for every error raised by the library. `kind()` is a stable,
/// machine-parseable tag used by the CLI when reporting failures.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* kind() const noexcept { return "error"; }
  /// Validation errors are caused by bad input or configuration; everything
  /// else is a runtime failure.
  virtual bool is_validation() const noexcept { return false; }
};

class ValueError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "value"; }
  bool is_validation() const noexcept override { return true; }
};

class ShapeError : public Error {
 public:
  ShapeError(const std::string& op, int axis, std::size_t got, std::size_t expected)
      : Error(op + ": shape mismatch on axis " + std::to_string(axis) + " (got " +
              std::to_string(got) + ", expected " + std::to_string(expected) + ")"),
        axis_(axis) {}
  explicit ShapeError(const std::string& what) : Error(what), axis_(-1) {}
  const char* kind() const noexcept override { return "shape"; }
  bool is_validation() const noexcept override { return true; }
  int axis() const noexcept { return axis_; }

 private:
  int axis_;
};

class NumericError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "numeric"; }
};

class IoError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "io"; }
};

class FormatError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "format"; }
  bool is_validation() const noexcept override { return true; }
};

}  // namespace qens
