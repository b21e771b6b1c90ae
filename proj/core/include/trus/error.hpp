#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace trus {

enum class ErrorCode {
  DegenerateVector,
  EmptyMatrix,
  ShapeMismatch,
  SinkFailure,
  BadMagic,
  VersionUnsupported,
  TruncatedPayload,
  NonFiniteValue,
  DuplicateSpeaker,
  EmptyPool,
  ValidationError,
  MissingMetadata,
  DegenerateDirection,
  InvalidStrength,
  NonUnitDirection,
  ConfigError,
  IoError,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Every failure raised by the engine carries one of the codes above so
/// callers (the CLI in particular) can map it to a stable exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& detail);

}  // namespace trus
