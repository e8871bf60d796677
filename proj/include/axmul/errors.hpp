#pragma once

#include <stdexcept>
#include <string>

namespace axmul {

// Bad user input: malformed config, unknown flag value, inconsistent shapes
// requested on the command line. CLI maps this to its own exit code.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or truncated data file (dataset, library, model container).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// The energy budget cannot be met even with the cheapest candidate per layer.
class InfeasibleBudget : public std::runtime_error {
 public:
  InfeasibleBudget(const std::string& msg, double min_ratio)
      : std::runtime_error(msg), min_achievable_ratio(min_ratio) {}
  double min_achievable_ratio;
};

}  // namespace axmul
