// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace beamckm {

/// Shapes of operands do not line up.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A configuration value is out of its admissible range.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A caller broke a documented precondition (non-scalar loss, missing grad, t out of range).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Input lies outside the function's domain (receiver inside a building, ring off the grid).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A metric cannot be evaluated (e.g. all-zero reference energy).
struct EvaluationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A required artifact (checkpoint, dataset) is absent.
struct MissingDependencyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Operator-supplied input failed validation (malformed beam file).
struct InputValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

}  // namespace beamckm
