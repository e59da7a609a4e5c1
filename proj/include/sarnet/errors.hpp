#pragma once

#include <stdexcept>
#include <string>

namespace sarnet {

/// Thrown when a caller breaks an operation's preconditions.
class ContractViolation : public std::logic_error {
 public:
  explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

/// A metric that has no value for the given input (single-class AUC, base AUC of 0.5).
class UndefinedMetric : public std::domain_error {
 public:
  explicit UndefinedMetric(const std::string& what) : std::domain_error(what) {}
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite loss or parameter encountered during training.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

}  // namespace sarnet
