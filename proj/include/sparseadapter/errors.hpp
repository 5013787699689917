#pragma once

#include <stdexcept>
#include <string>

namespace sparseadapter {

// Caller broke a documented precondition (bad shape, bad argument, bad config field).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A NaN or Inf appeared in an op output. Carries the op name.
class NumericFailure : public std::runtime_error {
 public:
  NumericFailure(std::string op, const std::string& detail)
      : std::runtime_error("non-finite value in op '" + op + "': " + detail), op_(std::move(op)) {}

  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

// Malformed on-disk artifact (mask, checkpoint, dataset).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid or inconsistent experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sparseadapter
