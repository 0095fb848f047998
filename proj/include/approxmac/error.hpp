// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace approxmac {

enum class ErrorCode {
  MostNegative,
  AccOverflow,
  InvalidSpec,
  ZeroReference,
  ShapeMismatch,
  DegenerateChannel,
  ParseError,
  NonFiniteWeight,
  BadMagic,
  CountMismatch,
  IoError,
  Internal,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MostNegative: return "MostNegative";
    case ErrorCode::AccOverflow: return "AccOverflow";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::ZeroReference: return "ZeroReference";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::DegenerateChannel: return "DegenerateChannel";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::NonFiniteWeight: return "NonFiniteWeight";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::CountMismatch: return "CountMismatch";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::Internal: return "Internal";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (the CLI in particular) can map it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

  /// Same code, message prefixed with the context (node name, file, ...).
  Error with_context(const std::string& context) const {
    Error e(*this);
    static_cast<std::runtime_error&>(e) = std::runtime_error(context + ": " + what());
    return e;
  }

 private:
  ErrorCode code_;
};

}  // namespace approxmac
