#pragma once

#include <stdexcept>
#include <string>

namespace esknet {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct AutodiffError : std::logic_error {
  using std::logic_error::logic_error;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace esknet
