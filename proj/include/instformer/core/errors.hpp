#pragma once

#include <stdexcept>
#include <string>

namespace instformer::core {

// Error taxonomy shared by all modules. The CLI maps these onto exit codes:
// ConfigError -> 2, NumericError -> 3, everything else -> 1.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct VocabularyError : std::runtime_error {
  explicit VocabularyError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DecodeError : std::runtime_error {
  explicit DecodeError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace instformer::core
