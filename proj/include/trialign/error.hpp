// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace trialign {

/// Error category carried by every exception the library throws. The CLI and
/// the query service surface it as the `code` field of a structured error.
enum class ErrorCode {
  io,
  parse,
  dangling_key,
  dim_mismatch,
  duplicate_id,
  invalid_argument,
  degenerate,
  text_less,
  layout_mismatch,
  corrupt,
  insufficient_data,
  non_finite,
  not_found,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::io: return "io";
    case ErrorCode::parse: return "parse";
    case ErrorCode::dangling_key: return "dangling_key";
    case ErrorCode::dim_mismatch: return "dim_mismatch";
    case ErrorCode::duplicate_id: return "duplicate_id";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::degenerate: return "degenerate";
    case ErrorCode::text_less: return "text_less";
    case ErrorCode::layout_mismatch: return "layout_mismatch";
    case ErrorCode::corrupt: return "corrupt";
    case ErrorCode::insufficient_data: return "insufficient_data";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::not_found: return "not_found";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace trialign
