#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fda {

enum class ErrorCode {
  ShapeMismatch,
  DimensionMismatch,
  ZeroNorm,
  ZeroMatrix,
  ZeroDirection,
  ConvergenceFailure,
  UnboundVariable,
  NotScalar,
  ArchitectureMismatch,
  Io,
  FormatViolation,
  InvalidSigma,
  ZeroTaskVector,
  DegenerateAnchor,
  DegenerateStart,
  RankDeficient,
  InvalidK,
  MissingAnchors,
  ConfigInvalid,
  InvalidArgument,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::ZeroNorm: return "ZeroNorm";
    case ErrorCode::ZeroMatrix: return "ZeroMatrix";
    case ErrorCode::ZeroDirection: return "ZeroDirection";
    case ErrorCode::ConvergenceFailure: return "ConvergenceFailure";
    case ErrorCode::UnboundVariable: return "UnboundVariable";
    case ErrorCode::NotScalar: return "NotScalar";
    case ErrorCode::ArchitectureMismatch: return "ArchitectureMismatch";
    case ErrorCode::Io: return "Io";
    case ErrorCode::FormatViolation: return "FormatViolation";
    case ErrorCode::InvalidSigma: return "InvalidSigma";
    case ErrorCode::ZeroTaskVector: return "ZeroTaskVector";
    case ErrorCode::DegenerateAnchor: return "DegenerateAnchor";
    case ErrorCode::DegenerateStart: return "DegenerateStart";
    case ErrorCode::RankDeficient: return "RankDeficient";
    case ErrorCode::InvalidK: return "InvalidK";
    case ErrorCode::MissingAnchors: return "MissingAnchors";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

/// Single exception type for the library; `code()` identifies the failure.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace fda
