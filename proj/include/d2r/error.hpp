#pragma once

#include <stdexcept>
#include <string>

namespace d2r {

// Error categories map onto CLI exit codes (config 1, data 2, numeric 3).
// Shape violations are programming errors and derive from invalid_argument.

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace d2r
