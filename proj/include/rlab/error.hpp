#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace rlab {

enum class ErrorKind {
  Validation,
  Shape,
  DegenerateInput,
  DegenerateVariance,
  Collinearity,
  Planning,
  Client,
  Timeout,
  CaptionUnavailable,
  Io,
  Lock,
  Parse,
  Analysis,
  Disconnected,
  Interrupted,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Validation: return "validation_error";
    case ErrorKind::Shape: return "shape_error";
    case ErrorKind::DegenerateInput: return "degenerate_input";
    case ErrorKind::DegenerateVariance: return "degenerate_variance";
    case ErrorKind::Collinearity: return "collinearity_error";
    case ErrorKind::Planning: return "planning_error";
    case ErrorKind::Client: return "client_error";
    case ErrorKind::Timeout: return "timeout";
    case ErrorKind::CaptionUnavailable: return "caption_unavailable";
    case ErrorKind::Io: return "io_error";
    case ErrorKind::Lock: return "lock_error";
    case ErrorKind::Parse: return "parse_error";
    case ErrorKind::Analysis: return "analysis_error";
    case ErrorKind::Disconnected: return "ui_disconnected";
    case ErrorKind::Interrupted: return "interrupted";
  }
  return "error";
}

// Base of every error the library throws. The kind is stable and is what
// callers (and the CLI exit-code mapping) switch on.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Raised by service clients. `elapsed_ms` is the time the failed attempt
// consumed, so callers can account for it on a virtual clock.
class ClientError : public Error {
 public:
  ClientError(ErrorKind kind, const std::string& message, bool retryable, std::int64_t elapsed_ms = 0)
      : Error(kind, message), retryable_(retryable), elapsed_ms_(elapsed_ms) {}

  bool retryable() const noexcept { return retryable_; }
  std::int64_t elapsed_ms() const noexcept { return elapsed_ms_; }

 private:
  bool retryable_;
  std::int64_t elapsed_ms_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

}  // namespace rlab
