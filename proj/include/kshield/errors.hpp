#pragma once

#include <stdexcept>
#include <string>

namespace kshield {

// Error taxonomy mapped to CLI exit codes: ConfigError -> 1, DataError -> 2,
// everything else -> 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or argument-domain violation of an operation.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid configuration value or combination.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed input data (datasets, checkpoints, report files).
struct DataError : Error {
  using Error::Error;
};

// Non-finite values or numerical degeneracy at runtime.
struct NumericError : Error {
  using Error::Error;
};

// Divergence during training; carries the epoch and batch where it happened.
struct TrainingError : Error {
  TrainingError(const std::string& what, int epoch_, int batch_)
      : Error(what + " (epoch " + std::to_string(epoch_) + ", batch " +
              std::to_string(batch_) + ")"),
        epoch(epoch_),
        batch(batch_) {}
  int epoch;
  int batch;
};

}  // namespace kshield
