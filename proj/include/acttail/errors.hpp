// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace acttail {

/// Precondition violations: bad k, alpha <= 2, shape mismatch, ...
class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed tensor file (bad header, offsets past EOF, ...).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor entry with a dtype outside {F16, F32, F64}.
class UnsupportedDtypeError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Hill fit where every top-k eigenvalue equals the cutoff (zero log-sum).
class DegenerateSpectrumError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Requested global sparsity cannot be met under the per-projection clamp.
class InfeasibleBudgetError : public std::runtime_error {
 public:
  InfeasibleBudgetError(const std::string& msg, double min_clamp)
      : std::runtime_error(msg), min_feasible_clamp(min_clamp) {}
  double min_feasible_clamp;
};

}  // namespace acttail
