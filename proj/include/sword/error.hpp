#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sword {

enum class ErrorCode {
  MalformedInput,
  // identity
  DuplicateDid,
  MalformedKey,
  // merkle
  IndexOutOfRange,
  // tal
  ClockRegression,
  WatermarkBeyondEnd,
  CorruptRecord,
  // cluster
  InsufficientPeers,
  AlreadyMember,
  UnknownVoter,
  NotMember,
  DegradedMode,
  // authproto
  UnknownSubject,
  ExpiredChallenge,
  OtpMismatch,
  UnknownChallenge,
  // sync
  NothingToSync,
  TooManyAttempts,
  // simnet
  OverlappingGroups,
  // harness
  InvalidScenario,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedInput: return "MalformedInput";
    case ErrorCode::DuplicateDid: return "DuplicateDid";
    case ErrorCode::MalformedKey: return "MalformedKey";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::ClockRegression: return "ClockRegression";
    case ErrorCode::WatermarkBeyondEnd: return "WatermarkBeyondEnd";
    case ErrorCode::CorruptRecord: return "CorruptRecord";
    case ErrorCode::InsufficientPeers: return "InsufficientPeers";
    case ErrorCode::AlreadyMember: return "AlreadyMember";
    case ErrorCode::UnknownVoter: return "UnknownVoter";
    case ErrorCode::NotMember: return "NotMember";
    case ErrorCode::DegradedMode: return "DegradedMode";
    case ErrorCode::UnknownSubject: return "UnknownSubject";
    case ErrorCode::ExpiredChallenge: return "ExpiredChallenge";
    case ErrorCode::OtpMismatch: return "OtpMismatch";
    case ErrorCode::UnknownChallenge: return "UnknownChallenge";
    case ErrorCode::NothingToSync: return "NothingToSync";
    case ErrorCode::TooManyAttempts: return "TooManyAttempts";
    case ErrorCode::OverlappingGroups: return "OverlappingGroups";
    case ErrorCode::InvalidScenario: return "InvalidScenario";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace sword
