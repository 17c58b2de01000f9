// Copyright (c) 2026 The sglora Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SGLORA_ERRORS_HPP_
#define SGLORA_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace sglora {

// Every failure surfaced by the toolkit carries one of these codes so that
// callers (and the CLI) can react to the class of failure, not the message.
enum class ErrorCode {
  kShape,        // matrix/vector dimension mismatch
  kLayout,       // adapter layout disagreement (length, placement, rank)
  kBadMagic,     // blob does not start with the expected magic
  kVersion,      // container version not supported by this reader
  kTruncated,    // file ended mid-payload
  kNonFinite,    // NaN/Inf where finite values are required
  kDuplicate,    // duplicate task id
  kParse,        // malformed JSON / CSV / config input
  kValidation,   // semantic constraint violated (ids, hashes, schema)
  kParameter,    // out-of-range argument (tau <= 0, empty text, ...)
  kContract,     // API misuse (non-scalar loss node, ...)
  kIo,           // filesystem failure
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShape: return "shape_error";
    case ErrorCode::kLayout: return "layout_error";
    case ErrorCode::kBadMagic: return "bad_magic";
    case ErrorCode::kVersion: return "version_error";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kDuplicate: return "duplicate_id";
    case ErrorCode::kParse: return "parse_error";
    case ErrorCode::kValidation: return "validation_error";
    case ErrorCode::kParameter: return "parameter_error";
    case ErrorCode::kContract: return "contract_error";
    case ErrorCode::kIo: return "io_error";
  }
  return "unknown_error";
}

}  // namespace sglora

#endif  // SGLORA_ERRORS_HPP_
