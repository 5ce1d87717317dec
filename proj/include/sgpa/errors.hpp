#pragma once

#include <stdexcept>
#include <string>

namespace sgpa {

/// Operand shapes are incompatible with the requested operation.
class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// A caller violated a documented precondition.
class ContractError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

/// Factorization failed at every jitter level.
class NotPositiveDefiniteError : public std::runtime_error {
public:
  NotPositiveDefiniteError(const std::string &what, double last_jitter)
      : std::runtime_error(what), last_jitter_(last_jitter) {}
  double last_jitter() const { return last_jitter_; }

private:
  double last_jitter_;
};

/// Non-finite values or divergence during training.
class NumericalError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Malformed run configuration, schema or input file.
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

} // namespace sgpa
