#pragma once

#include <stdexcept>
#include <string>

namespace epical {

/// Bad argument shape or count (empty inputs, nonpositive sizes, mismatched dimensions).
struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A value lies outside its admissible domain (parameter box, population bounds).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

/// Numerical breakdown: non-finite loss, failed Cholesky, and similar.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Object used in the wrong state, e.g. gradients requested from a model in training mode.
struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Invalid or inconsistent configuration and artifacts.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace epical
