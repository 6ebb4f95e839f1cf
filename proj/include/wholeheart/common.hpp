#pragma once

#include <stdexcept>
#include <string>

namespace wholeheart {

// Process exit codes shared by the CLI and the failure-mode tests.
enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumeric = 4,
};

// Invalid configuration: bad shapes, bad hyperparameters, malformed flags.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Missing or corrupt datasets, containers, checkpoints.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values produced during compute.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace wholeheart
