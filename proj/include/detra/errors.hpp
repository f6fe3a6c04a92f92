#pragma once

#include <stdexcept>
#include <string>

namespace detra {

/// Bad user input: configs, files, arguments. Maps to CLI exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Numerical fault during a run (NaN and friends). Maps to CLI exit code 2.
class NumericalFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace detra
