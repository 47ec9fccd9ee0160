#pragma once

#include <stdexcept>
#include <string>

namespace advflyp {

enum class ErrorKind {
  Config,
  Contract,
  Dimension,
  Numeric,
  DegenerateEmbedding,
  Format,
  Io,
  Parse,
  Validation,
};

/// Base of every error raised by the toolkit. The kind decides the CLI exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return "config error";
    case ErrorKind::Contract: return "contract error";
    case ErrorKind::Dimension: return "dimension error";
    case ErrorKind::Numeric: return "numeric error";
    case ErrorKind::DegenerateEmbedding: return "degenerate embedding";
    case ErrorKind::Format: return "format error";
    case ErrorKind::Io: return "io error";
    case ErrorKind::Parse: return "parse error";
    case ErrorKind::Validation: return "validation error";
  }
  return "error";
}

/// 0 success, 2 config, 3 data/format, 4 numeric.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Contract:
    case ErrorKind::Dimension:
      return 2;
    case ErrorKind::Format:
    case ErrorKind::Io:
    case ErrorKind::Parse:
    case ErrorKind::Validation:
      return 3;
    case ErrorKind::Numeric:
    case ErrorKind::DegenerateEmbedding:
      return 4;
  }
  return 1;
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, std::string(to_string(kind)) + ": " + what);
}

}  // namespace advflyp
