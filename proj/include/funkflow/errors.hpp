#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace funkflow {

// Base for all library failures. Each category maps to a CLI exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
  virtual const char* prefix() const noexcept { return "error"; }
};

// Malformed input, violated precondition or schema.
class ValidationError : public Error {
 public:
  using Error::Error;
  const char* prefix() const noexcept override { return "validation-error"; }
};

// Something went numerically wrong (non-finite values, failed factorization).
class NumericalError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
  const char* prefix() const noexcept override { return "numerical-error"; }
};

class SimulationFailure : public NumericalError {
 public:
  SimulationFailure(const std::string& what, std::size_t step)
      : NumericalError(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class DegenerateTrajectory : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class CholeskyFailure : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class NonFiniteLoss : public NumericalError {
 public:
  explicit NonFiniteLoss(const std::string& op)
      : NumericalError("non-finite value produced by " + op), op_(op) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

class IntegrationFailure : public NumericalError {
 public:
  explicit IntegrationFailure(std::size_t step)
      : NumericalError("non-finite flow state at integration step " + std::to_string(step)),
        step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class InsufficientData : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

}  // namespace funkflow
