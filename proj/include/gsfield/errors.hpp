#pragma once

#include <stdexcept>
#include <string>

namespace gsf {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Container/tensor parsing failures, kept distinct so callers can report
// exactly what is wrong with a file.
struct MalformedHeaderError : IoError {
  using IoError::IoError;
};
struct VersionMismatchError : IoError {
  using IoError::IoError;
};
struct TruncatedPayloadError : IoError {
  using IoError::IoError;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Backward pass invoked against forward state from a different scene.
struct StaleStateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace gsf
