#pragma once

#include <stdexcept>
#include <string>

namespace minibert {

enum class ErrorKind {
  kInvalidArgument,  // bad user input (empty corpus, rate out of range, ...)
  kDimension,        // tensor shape disagreement
  kContract,         // API misuse: non-scalar backward, missing gradient, ...
  kParse,            // malformed file contents
  kIo,               // file could not be opened / written
  kUndefinedMetric,  // metric undefined for the given labels (single class)
  kMismatch,         // checkpoint and config disagree
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void Fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace minibert
