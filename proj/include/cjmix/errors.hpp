#pragma once

#include <stdexcept>
#include <string>

namespace cjmix {

// Malformed data, configuration or arguments.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The fusion prior cannot be normalized and the caller did not override.
class ImproperPriorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A numerical routine could not produce a finite answer.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cjmix
