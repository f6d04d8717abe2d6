#pragma once

#include <stdexcept>
#include <string>

namespace wmb {

/// Failure categories. Each maps onto one CLI exit code.
enum class ErrorKind {
  kConfig,        // bad configuration or usage of an operation
  kShape,         // dimension / length mismatch
  kPrecondition,  // documented precondition violated
  kData,          // malformed or out-of-range input data, unreadable files
  kNumerical,     // non-finite values, loss of positive-definiteness
  kVersion,       // archive format mismatch
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  /// 0 success, 2 config, 3 data, 4 numerical, 5 version.
  int exit_code() const noexcept {
    switch (kind_) {
      case ErrorKind::kData:
        return 3;
      case ErrorKind::kNumerical:
        return 4;
      case ErrorKind::kVersion:
        return 5;
      default:
        return 2;
    }
  }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool ok, ErrorKind kind, const std::string& what) {
  if (!ok) fail(kind, what);
}

}  // namespace wmb
