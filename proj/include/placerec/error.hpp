#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace placerec {

enum class ErrorKind {
  EmptyInput,
  InsufficientPoints,
  ParseError,
  ShapeError,
  ContractViolation,
  TrainingDiverged,
  InsufficientNegatives,
  NoValidSegments,
  DuplicateId,
  BadK,
  EmptySubmap,
  ConfigError,
  IoError,
};

std::string_view to_string(ErrorKind kind);

/// Every failure surfaced by the library carries one of the kinds above so
/// the CLI can map it to an exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::InsufficientPoints: return "InsufficientPoints";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::ShapeError: return "ShapeError";
    case ErrorKind::ContractViolation: return "ContractViolation";
    case ErrorKind::TrainingDiverged: return "TrainingDiverged";
    case ErrorKind::InsufficientNegatives: return "InsufficientNegatives";
    case ErrorKind::NoValidSegments: return "NoValidSegments";
    case ErrorKind::DuplicateId: return "DuplicateId";
    case ErrorKind::BadK: return "BadK";
    case ErrorKind::EmptySubmap: return "EmptySubmap";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace placerec
