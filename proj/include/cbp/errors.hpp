#pragma once

#include <stdexcept>
#include <string>

namespace cbp {

// Horizon or shape mismatch between trajectories, distributions or weights.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite values, non-positive variances, log of zero density.
class NumericDomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Unknown agent id.
class LookupError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::runtime_error("config field '" + field + "': " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cbp
