#include "trus/error.hpp"

namespace trus {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::DegenerateVector: return "DegenerateVector";
    case ErrorCode::EmptyMatrix: return "EmptyMatrix";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::SinkFailure: return "SinkFailure";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionUnsupported: return "VersionUnsupported";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::DuplicateSpeaker: return "DuplicateSpeaker";
    case ErrorCode::EmptyPool: return "EmptyPool";
    case ErrorCode::ValidationError: return "ValidationError";
    case ErrorCode::MissingMetadata: return "MissingMetadata";
    case ErrorCode::DegenerateDirection: return "DegenerateDirection";
    case ErrorCode::InvalidStrength: return "InvalidStrength";
    case ErrorCode::NonUnitDirection: return "NonUnitDirection";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& detail)
    : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

void fail(ErrorCode code, const std::string& detail) { throw Error(code, detail); }

}  // namespace trus
