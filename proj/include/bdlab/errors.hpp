#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace bdlab {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct InputError : Error {
  using Error::Error;
};

struct StructuralError : Error {
  using Error::Error;
};

struct AdapterError : Error {
  using Error::Error;
};

struct OrchestrationError : Error {
  using Error::Error;
};

// Raised by the archive reader; carries the byte offset where parsing failed.
struct FormatError : Error {
  FormatError(const std::string& what, std::uint64_t byte_pos)
      : Error(what + " (at byte " + std::to_string(byte_pos) + ")"),
        position(byte_pos) {}
  std::uint64_t position;
};

// Non-finite loss during optimization.
struct TrainingError : Error {
  TrainingError(const std::string& what, std::int64_t step_index)
      : Error(what + " at step " + std::to_string(step_index)), reason(what), step(step_index) {}
  std::string reason;
  std::int64_t step;
};

}  // namespace bdlab
