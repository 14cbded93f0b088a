#pragma once

#include <stdexcept>
#include <string>

namespace phonelm {

// Invalid configuration or arguments (bad rates, class-count mismatch, ...).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem problems: missing files, unwritable paths.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed file contents: bad magic, version mismatch, truncation,
// tensor shapes that disagree with the embedded model config.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required (gradients, activations).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace phonelm
