#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sala {

// Shape disagreement between operands; the message names both shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A center point ended up with no valid neighbor.
class EmptyNeighborhoodError : public std::runtime_error {
 public:
  explicit EmptyNeighborhoodError(std::size_t center)
      : std::runtime_error("empty neighborhood at center " + std::to_string(center)),
        center_(center) {}
  std::size_t center() const noexcept { return center_; }

 private:
  std::size_t center_;
};

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class UnsupportedConfigError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class DegeneratePyramidError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CoverageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or truncated binary/text file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sala
