#pragma once

#include <stdexcept>
#include <string>

namespace hetsae {

// Bad arguments, malformed files, inconsistent configuration.
class InvalidInput : public std::invalid_argument {
 public:
  explicit InvalidInput(const std::string& what) : std::invalid_argument(what) {}
};

// Failures that arise while computing: singular systems, non-finite chain
// states, loss of positive definiteness.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace hetsae
