// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "acttail/tensor_store.hpp"

namespace acttail {

// lambda <= kZeroFilterRel * lambda_max is treated as zero before Hill
// fitting (Eq. 5 is undefined at a zero reference eigenvalue).
inline constexpr double kZeroFilterRel = 1e-12;

/// ESD of one projection's correlation matrix plus its Hill fit.
struct SpectrumRecord {
  std::string name;
  int layer = 0;
  Proj proj = Proj::other;
  std::size_t rows = 0;                  // d_out of the source matrix
  std::vector<double> eigenvalues;       // ascending, >= 0
  std::size_t n = 0;                     // = d_in
  double alpha = 0.0;
  std::size_t k_used = 0;
  double lambda_ref = 0.0;               // lambda_{n-k}
  double lambda_max = 0.0;
  bool ok = false;
  std::string error;
};

/// Eigenvalues of W^T W as squared singular values of W, ascending. When
/// d_out < d_in the d_in - d_out missing eigenvalues are exact zeros.
std::vector<double> correlation_spectrum(const WeightMatrix& w);

struct HillFit {
  double alpha;
  double lambda_ref;
};

/// Eq. 5: alpha = 1 + k / sum_{i=1..k} ln(lambda_{n-i+1} / lambda_{n-k}).
/// `eigenvalues` ascending, 1 <= k <= n-1. Ratios are formed before logs, so
/// the result depends on the spectrum only through eigenvalue ratios.
HillFit hill_alpha(std::span<const double> eigenvalues, std::size_t k);

/// One record per matrix (input order preserved). Per-matrix failures become
/// failure records instead of aborting the batch. threads = 0 picks
/// hardware concurrency.
std::vector<SpectrumRecord> analyze_all(
    const std::vector<WeightMatrix>& matrices, double k_fraction,
    unsigned threads = 0);

/// R(q): fraction of total eigenvalue mass in the top ceil(q*n) eigenvalues.
double energy_capture(std::span<const double> eigenvalues, double q);

/// Weak-l_p (Lorentz) quasi-norm: max_j j^(1/p) |y|_(j), p > 2.
double weak_lp_norm(std::span<const double> y, double p);

// JSONL serialization: keys {layer, proj, n, alpha, k_used, lambda_ref,
// lambda_max} plus {rows, name}; failure records carry {layer, proj, name,
// error}.
void write_spectra_jsonl(std::ostream& out,
                         const std::vector<SpectrumRecord>& records);
std::vector<SpectrumRecord> read_spectra_jsonl(std::istream& in);

}  // namespace acttail
