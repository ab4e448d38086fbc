// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "acttail/spectral.hpp"

namespace acttail {

/// Eq. 6 parameters. s1/s2 bound the raw non-uniformity band; eta rescales
/// to hit the global budget S; clamp_max caps any single projection.
struct AllocationConfig {
  double global_sparsity = 0.0;  // S in [0, 1)
  double s1 = 0.0;
  double s2 = 0.0;
  double clamp_max = 0.99;

  /// The default +-20% band around S.
  static AllocationConfig defaults(double S) {
    return {S, 0.8 * S, 1.2 * S, 0.99};
  }
};

struct AllocationInput {
  int layer = 0;
  Proj proj = Proj::other;
  double alpha = 0.0;
  std::size_t d_in = 0;
  std::size_t params = 0;  // d_out * d_in, weights the budget constraint
};

struct AllocationEntry {
  int layer = 0;
  Proj proj = Proj::other;
  double alpha = 0.0;
  std::size_t d_in = 0;
  std::size_t params = 0;
  double raw_s = 0.0;  // pre-eta affine map of alpha
  double s = 0.0;      // min(eta * raw_s, clamp_max)
  std::size_t K = 0;   // round((1 - s) * d_in)
};

struct AllocationPlan {
  double global_sparsity = 0.0;
  double eta = 1.0;
  double achieved = 0.0;  // from the integer K values
  std::vector<AllocationEntry> entries;
};

/// Eq. 6 with the budget constraint sum(s*d) = S*sum(d). eta is solved by
/// bisection when the clamp is active, closed-form otherwise.
AllocationPlan allocate(const std::vector<AllocationInput>& inputs,
                        const AllocationConfig& cfg);

/// Records -> inputs helper (params = rows * n). Failed records are
/// rejected with DomainError.
std::vector<AllocationInput> allocation_inputs(
    const std::vector<SpectrumRecord>& records);

/// The uniform Top-K baseline: every entry gets s = S.
AllocationPlan uniform_plan(const std::vector<AllocationInput>& dims,
                            double S);

/// Theorem-1 rule: ceil((sqrt(ln(d_out/delta))/eps)^(2(alpha-1)/(alpha-2))),
/// at least 1, capped at d_out.
std::size_t theoretical_k(double alpha, double epsilon, std::size_t d_out,
                          double delta);

/// Parameter-weighted sparsity of the integer-K plan entries.
double achieved_sparsity(const std::vector<AllocationEntry>& entries);

void write_plan_json(std::ostream& out, const AllocationPlan& plan);
AllocationPlan read_plan_json(std::istream& in);

}  // namespace acttail
