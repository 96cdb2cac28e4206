#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace msae {

// Base for every error the toolkit raises on purpose. `kind()` is a stable
// short name used by the CLI and the HTTP service when reporting failures.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

#define MSAE_DEFINE_ERROR(Name, tag)                         \
  class Name : public Error {                                \
   public:                                                   \
    using Error::Error;                                      \
    const char* kind() const noexcept override { return tag; } \
  }

MSAE_DEFINE_ERROR(InvalidArgument, "invalid-argument");
MSAE_DEFINE_ERROR(NotFound, "not-found");
MSAE_DEFINE_ERROR(TrainingDiverged, "training-diverged");
MSAE_DEFINE_ERROR(ClientError, "client-error");
MSAE_DEFINE_ERROR(ParseError, "parse-error");
MSAE_DEFINE_ERROR(RefinementFailed, "refinement-failed");
MSAE_DEFINE_ERROR(CategorizationFailed, "categorization-failed");
MSAE_DEFINE_ERROR(JudgeFailed, "judge-failed");
MSAE_DEFINE_ERROR(ScoreUnavailable, "score-unavailable");
MSAE_DEFINE_ERROR(ConfigError, "config-error");

#undef MSAE_DEFINE_ERROR

// Malformed or truncated binary file. Carries the byte offset where the
// reader gave up.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  const char* kind() const noexcept override { return "format-error"; }
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidArgument(msg);
}

}  // namespace msae
