#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace smi {

enum class ErrorCode {
  ShapeMismatch,
  LabelOutOfRange,
  GraphConsumed,
  DegenerateRow,
  NonFinite,
  EmptyRetained,
  StaleAttention,
  ScheduleOutOfRange,
  DegenerateRange,
  EmptyCalibration,
  DivergenceDetected,
  BadMagic,
  TruncatedFile,
  CountMismatch,
  VersionMismatch,
  IoError,
  ConfigError,
  InvalidArgument,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::GraphConsumed: return "GraphConsumed";
    case ErrorCode::DegenerateRow: return "DegenerateRow";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::EmptyRetained: return "EmptyRetained";
    case ErrorCode::StaleAttention: return "StaleAttention";
    case ErrorCode::ScheduleOutOfRange: return "ScheduleOutOfRange";
    case ErrorCode::DegenerateRange: return "DegenerateRange";
    case ErrorCode::EmptyCalibration: return "EmptyCalibration";
    case ErrorCode::DivergenceDetected: return "DivergenceDetected";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::CountMismatch: return "CountMismatch";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

/// Single exception type for the library; `code()` is what callers branch on.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace smi
