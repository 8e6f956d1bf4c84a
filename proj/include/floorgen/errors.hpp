#pragma once

#include <stdexcept>

namespace floorgen {

/// Bad arguments or configuration. The CLI maps this to exit code 2.
struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// File system failures.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Corrupt or mismatched artifacts (checkpoints, manifests, images).
struct LoadError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A building spec that cannot be realized.
struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace floorgen
