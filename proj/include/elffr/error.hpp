#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace elffr {

enum class ErrorCode {
  MismatchedRows,
  NonFiniteValue,
  NonMonotoneGrid,
  TooFewGridPoints,
  MissingIntercept,
  DegenerateKnots,
  GridMismatch,
  DimensionMismatch,
  ShapeMismatch,
  TooFewPoints,
  SingularSystem,
  DegenerateResidual,
  InsufficientPairs,
  UnsupportedQ,
  NegativeVariance,
  SingularCovariance,
  TooManyFailures,
  InvalidArgument,
  Io,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library carries one of the codes above so
/// callers (and the CLI exit-code mapping) can dispatch without parsing text.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MismatchedRows: return "MismatchedRows";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::NonMonotoneGrid: return "NonMonotoneGrid";
    case ErrorCode::TooFewGridPoints: return "TooFewGridPoints";
    case ErrorCode::MissingIntercept: return "MissingIntercept";
    case ErrorCode::DegenerateKnots: return "DegenerateKnots";
    case ErrorCode::GridMismatch: return "GridMismatch";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::SingularSystem: return "SingularSystem";
    case ErrorCode::DegenerateResidual: return "DegenerateResidual";
    case ErrorCode::InsufficientPairs: return "InsufficientPairs";
    case ErrorCode::UnsupportedQ: return "UnsupportedQ";
    case ErrorCode::NegativeVariance: return "NegativeVariance";
    case ErrorCode::SingularCovariance: return "SingularCovariance";
    case ErrorCode::TooManyFailures: return "TooManyFailures";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

}  // namespace elffr
