#pragma once

#include <stdexcept>
#include <string>

namespace defgrade {

enum class ErrorKind {
  invalid_argument,
  config,
  prerequisite,
  runtime,
};

// Base of every exception thrown by the library. The kind decides the C API
// status code and, through it, the CLI exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& m) : Error(ErrorKind::invalid_argument, m) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error(ErrorKind::config, m) {}
};

class PrerequisiteError : public Error {
 public:
  explicit PrerequisiteError(const std::string& m) : Error(ErrorKind::prerequisite, m) {}
};

class RuntimeFailure : public Error {
 public:
  explicit RuntimeFailure(const std::string& m) : Error(ErrorKind::runtime, m) {}
};

}  // namespace defgrade
