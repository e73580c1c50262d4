// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace pemma {

// Typed error hierarchy. The CLI maps these onto process exit codes:
// ConfigError -> 2, DataError -> 3, NumericError -> 4, anything else -> 1.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad shapes, bad arguments, malformed run configuration, stage misuse.
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Unreadable/inconsistent inputs: volumes, manifests, checkpoints, records.
struct DataError : Error {
  explicit DataError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf escapes, degenerate norms, divergent optimisation.
struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

}  // namespace pemma
