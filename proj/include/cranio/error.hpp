#pragma once

#include <stdexcept>
#include <string>

namespace cranio {

enum class ErrorKind {
  Shape,
  NonFinite,
  InvalidArgument,
  State,
  NotFound,
  Io,
  Format,
  Range,
  Usage,
  Diverged,
};

const char* to_string(ErrorKind kind);

// Every failure in the library surfaces as this type. The message is a single
// line so the CLI can print it as-is.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string where, const std::string& message)
      : std::runtime_error(where + ": " + message), kind_(kind), where_(std::move(where)) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& where() const noexcept { return where_; }

 private:
  ErrorKind kind_;
  std::string where_;
};

}  // namespace cranio
