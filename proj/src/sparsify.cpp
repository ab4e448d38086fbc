// SPDX-License-Identifier: Apache-2.0
#include "acttail/sparsify.hpp"

#include <algorithm>
#include <chrono>
#include <iomanip>
#include <cmath>
#include <numeric>
#include <ostream>

#include "acttail/errors.hpp"

namespace acttail {

TopKResult topk_mask(std::span<const double> h, std::size_t K) {
  const std::size_t n = h.size();
  if (K > n)
    throw DomainError("topk_mask: K = " + std::to_string(K) +
                      " exceeds length " + std::to_string(n));
  TopKResult r;
  r.K = K;
  r.sparsity = n == 0 ? 0.0
                      : 1.0 - static_cast<double>(K) / static_cast<double>(n);
  r.kept_indices.resize(n);
  std::iota(r.kept_indices.begin(), r.kept_indices.end(), std::size_t{0});
  const auto larger = [&h](std::size_t a, std::size_t b) {
    const double ma = std::fabs(h[a]), mb = std::fabs(h[b]);
    if (ma != mb) return ma > mb;
    return a < b;  // tie: lower index wins
  };
  if (K < n) {
    std::nth_element(r.kept_indices.begin(), r.kept_indices.begin() + K,
                     r.kept_indices.end(), larger);
    r.kept_indices.resize(K);
  }
  std::sort(r.kept_indices.begin(), r.kept_indices.end());
  r.sparse_input.assign(n, 0.0);
  for (std::size_t idx : r.kept_indices) r.sparse_input[idx] = h[idx];
  return r;
}

std::vector<double> masked_project(const WeightMatrix& w,
                                   const TopKResult& r) {
  if (r.sparse_input.size() != w.cols)
    throw DomainError("masked_project: input length " +
                      std::to_string(r.sparse_input.size()) +
                      " does not match d_in " + std::to_string(w.cols));
  std::vector<double> out(w.rows, 0.0);
  const bool full = r.kept_indices.size() == w.cols;
  for (std::size_t i = 0; i < w.rows; ++i) {
    const double* row = w.values.data() + i * w.cols;
    double acc = 0.0;
    if (full) {
      // same ascending accumulation, contiguous access
      for (std::size_t j = 0; j < w.cols; ++j)
        acc += row[j] * r.sparse_input[j];
    } else {
      for (std::size_t j : r.kept_indices) acc += row[j] * r.sparse_input[j];
    }
    out[i] = acc;
  }
  return out;
}

double truncation_error(std::span<const double> h, std::size_t K) {
  const std::size_t n = h.size();
  if (K > n) throw DomainError("truncation_error: K exceeds length");
  if (K == n) return 0.0;
  std::vector<double> mags(n);
  for (std::size_t i = 0; i < n; ++i) mags[i] = std::fabs(h[i]);
  std::sort(mags.begin(), mags.end());  // ascending; dropped = first n-K
  double sum = 0.0;
  for (std::size_t i = 0; i < n - K; ++i) sum += mags[i] * mags[i];
  return std::sqrt(sum);
}

namespace {
std::vector<double> dense_product(const WeightMatrix& w,
                                  std::span<const double> h) {
  std::vector<double> out(w.rows, 0.0);
  for (std::size_t i = 0; i < w.rows; ++i) {
    const double* row = w.values.data() + i * w.cols;
    double acc = 0.0;
    for (std::size_t j = 0; j < w.cols; ++j) acc += row[j] * h[j];
    out[i] = acc;
  }
  return out;
}

template <typename F>
double median_ns(F&& fn, int repeats) {
  std::vector<double> times;
  times.reserve(repeats);
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(
        std::chrono::duration<double, std::nano>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  return times[times.size() / 2];
}
}  // namespace

std::vector<TimingRow> timed_project(const WeightMatrix& w,
                                     std::span<const double> h,
                                     std::span<const std::size_t> k_list,
                                     int repeats) {
  if (repeats < 1) throw DomainError("timed_project: repeats must be >= 1");
  w.validate();
  if (h.size() != w.cols) throw DomainError("timed_project: shape mismatch");

  std::vector<double> dense_out;
  const double dense_t =
      median_ns([&] { dense_out = dense_product(w, h); }, repeats);

  std::vector<TimingRow> rows;
  for (std::size_t K : k_list) {
    const TopKResult mask = topk_mask(h, K);
    const std::vector<double> oracle = dense_product(w, mask.sparse_input);
    bool correct = true;
    std::vector<double> times;
    times.reserve(repeats);
    for (int rep = 0; rep < repeats; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      const std::vector<double> out = masked_project(w, mask);
      const auto t1 = std::chrono::steady_clock::now();
      times.push_back(
          std::chrono::duration<double, std::nano>(t1 - t0).count());
      for (std::size_t i = 0; i < out.size(); ++i)
        if (std::fabs(out[i] - oracle[i]) > 1e-12) correct = false;
    }
    std::sort(times.begin(), times.end());
    const double t = times[times.size() / 2];
    TimingRow row;
    row.d_in = w.cols;
    row.d_out = w.rows;
    row.K = K;
    row.sparsity = mask.sparsity;
    row.median_ns = t;
    row.dense_ns = dense_t;
    row.speedup = t > 0.0 ? dense_t / t : 0.0;
    row.correct = correct;
    rows.push_back(row);
  }
  return rows;
}

void write_timing_csv(std::ostream& out, const std::vector<TimingRow>& rows) {
  out << std::setprecision(12);
  out << "d_in,d_out,K,sparsity,median_ns,dense_ns,speedup,correct\n";
  for (const auto& r : rows) {
    out << r.d_in << ',' << r.d_out << ',' << r.K << ',' << r.sparsity << ','
        << r.median_ns << ',' << r.dense_ns << ',' << r.speedup << ','
        << (r.correct ? "true" : "false") << '\n';
  }
}

}  // namespace acttail
