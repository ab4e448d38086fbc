// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <vector>

#include "acttail/tensor_store.hpp"

namespace acttail {

/// Eq. 2/3: the kept-index set and the masked input for one projection.
struct TopKResult {
  std::vector<std::size_t> kept_indices;  // ascending, exactly K of them
  std::vector<double> sparse_input;       // h with dropped entries zeroed
  std::size_t K = 0;
  double sparsity = 0.0;  // 1 - K/d_in
};

/// Keeps the K largest-magnitude entries; ties broken by lower index.
TopKResult topk_mask(std::span<const double> h, std::size_t K);

/// W * h_tilde accumulating only the kept columns, ascending index order.
/// Bit-compatible with the dense product against the zeroed vector.
std::vector<double> masked_project(const WeightMatrix& w, const TopKResult& r);

/// l2 norm of the dropped entries: sqrt(sum_{j>K} |h|_(j)^2).
double truncation_error(std::span<const double> h, std::size_t K);

struct TimingRow {
  std::size_t d_in = 0, d_out = 0, K = 0;
  double sparsity = 0.0;
  double median_ns = 0.0;
  double dense_ns = 0.0;
  double speedup = 0.0;
  bool correct = true;  // output checked against the dense oracle
};

/// Wall-clock of the column-skipping matvec per K vs the dense baseline.
/// Measurement only; machine-dependent numbers are reported, not asserted.
std::vector<TimingRow> timed_project(const WeightMatrix& w,
                                     std::span<const double> h,
                                     std::span<const std::size_t> k_list,
                                     int repeats);

void write_timing_csv(std::ostream& out, const std::vector<TimingRow>& rows);

}  // namespace acttail
