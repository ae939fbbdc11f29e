#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace transmed {

enum class ErrorCode {
  MissingOutcome,
  NonBinaryCode,
  DimensionMismatch,
  EmptyArm,
  DegenerateBounds,
  MissingPi,
  AllZeroWeights,
  SingularDesign,
  FoldTooSmall,
  ReplicationFailed,
  ScenarioAborted,
  InvalidArgument,
};

const char* to_string(ErrorCode code);

// Every library failure carries a code; data errors may also carry the
// offending row index so the CLI can report it.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what,
        std::optional<std::size_t> row = std::nullopt)
      : std::runtime_error(what), code_(code), row_(row) {}

  ErrorCode code() const noexcept { return code_; }
  std::optional<std::size_t> row() const noexcept { return row_; }

 private:
  ErrorCode code_;
  std::optional<std::size_t> row_;
};

}  // namespace transmed
