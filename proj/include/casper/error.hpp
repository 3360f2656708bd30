#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace casper {

/// Tensor shapes that cannot be combined by the requested operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A numeric operation evaluated outside its domain (e.g. log of a non-positive value).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Malformed input data (non-finite observations, inconsistent shapes).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// CSV parse failure carrying a 1-based location. Column 0 means "whole row".
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& file, std::size_t row, std::size_t column, const std::string& what)
      : std::runtime_error(file + ":" + std::to_string(row) + ":" + std::to_string(column) + ": " + what),
        row_(row),
        column_(column) {}

  std::size_t row() const noexcept { return row_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t row_;
  std::size_t column_;
};

/// Invalid configuration document or field value.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Synthetic world whose VAR companion matrix is not stable.
class GenerationError : public ConfigError {
 public:
  GenerationError(const std::string& what, double spectral_radius)
      : ConfigError(what), spectral_radius_(spectral_radius) {}

  double spectral_radius() const noexcept { return spectral_radius_; }

 private:
  double spectral_radius_;
};

/// Training produced non-finite losses on consecutive steps.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint and dataset (or two artifacts) disagree on shape or architecture.
class CompatibilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Metrics or reports requested over an empty evaluation set.
class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace casper
