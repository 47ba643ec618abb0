#pragma once

#include <stdexcept>
#include <string>

namespace grouprobe {

enum class ErrorKind {
  Format,        // bad magic, version or dtype in a binary file
  Corruption,    // truncated or oversized payload
  Validation,    // a typed invariant does not hold
  Schema,        // CSV / JSON layout problems
  Degenerate,    // zero-norm rows, all-zero weight classes
  Io,
  InvalidArgument,
  IncompleteAnnotation,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  // Errors the user can fix by changing inputs (exit code 2 in the CLI).
  bool is_validation() const noexcept {
    return kind_ != ErrorKind::Io && kind_ != ErrorKind::Corruption;
  }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace grouprobe
