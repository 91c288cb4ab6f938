#pragma once

#include <stdexcept>
#include <string>

namespace tpo {

// Bad user input: malformed config, unknown names, violated preconditions on
// arguments. The CLI maps this to exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Enumeration would exceed the state-count guard.
class SizeError : public std::length_error {
 public:
  using std::length_error::length_error;
};

}  // namespace tpo
