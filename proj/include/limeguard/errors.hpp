#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace limeguard {

/// Invalid configuration, violated precondition, or shape mismatch.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values produced by a model or a solver.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what, std::ptrdiff_t sample_index = -1)
      : std::runtime_error(what), sample_index_(sample_index) {}

  // -1 when the failure is not attributable to a single sample.
  std::ptrdiff_t sample_index() const noexcept { return sample_index_; }

 private:
  std::ptrdiff_t sample_index_;
};

/// Training loss became NaN/Inf or parameters left the finite range.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, int epoch)
      : std::runtime_error(what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

/// Malformed or inconsistent dataset file.
class IngestionError : public std::runtime_error {
 public:
  IngestionError(const std::string& file, const std::string& what)
      : std::runtime_error(file + ": " + what), file_(file) {}
  const std::string& file() const noexcept { return file_; }

 private:
  std::string file_;
};

/// The model backend cannot provide a required differentiation order.
class UnsupportedCapability : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace limeguard
