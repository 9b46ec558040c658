#pragma once

#include <stdexcept>
#include <string>

namespace ewr {

// Error taxonomy shared across modules. The CLI maps kinds to exit codes:
// 0 success, 1 usage, 2 data error, 3 numeric error.
enum class ErrorKind {
  usage,
  io,
  malformed_header,
  truncated_buffer,
  duplicate_name,
  non_finite,
  alignment,
  invalid_config,
  fingerprint_mismatch,
  negative_fisher,
  missing_fisher,
  empty_dataset,
  token_out_of_range,
  divergence,
  enumeration_unsupported,
  data,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  int exit_code() const noexcept {
    switch (kind_) {
      case ErrorKind::usage:
        return 1;
      case ErrorKind::non_finite:
      case ErrorKind::negative_fisher:
      case ErrorKind::divergence:
        return 3;
      default:
        return 2;
    }
  }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace ewr
