// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace acttail {

enum class Proj { q, k, v, o, gate, up, down, other };

const char* to_string(Proj p);
Proj proj_from_string(std::string_view s);  // throws DomainError on unknown

/// One projection weight, row-major 64-bit values.
struct WeightMatrix {
  std::string name;
  int layer = 0;
  Proj proj = Proj::other;
  std::size_t rows = 0;  // d_out
  std::size_t cols = 0;  // d_in
  std::vector<double> values;

  double at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
  double& at(std::size_t i, std::size_t j) { return values[i * cols + j]; }

  /// Throws DomainError if the shape/value invariants are broken.
  void validate() const;
};

struct SkippedTensor {
  std::string name;
  std::string reason;
};

struct LoadResult {
  std::vector<WeightMatrix> matrices;
  std::vector<SkippedTensor> skipped;  // non-2-D entries, in file order
};

// Tensor file layout: u64 LE header length N, then N bytes of UTF-8 JSON
// mapping name -> {"dtype": "F16"|"F32"|"F64", "shape": [..],
// "data_offsets": [begin, end]} with offsets relative to the first byte after
// the header, then the raw little-endian payloads. "__metadata__" is ignored.
LoadResult load_tensor_file(const std::filesystem::path& path);

/// Writes all matrices as F64 payloads. load(save(m)) is bit-exact.
void save_tensor_file(const std::vector<WeightMatrix>& matrices,
                      const std::filesystem::path& path);

/// Extracts (layer, proj) from checkpoint-style names. Total: unmatched
/// names map to (0, other).
std::pair<int, Proj> parse_name(std::string_view raw);

/// W = U diag(sigma) V^T with U, V from QR of seeded Gaussian matrices and
/// sigma_j^2 = j^(-1/(alpha-1)), j = 1..min(rows, cols). Deterministic.
WeightMatrix synth_powerlaw_matrix(std::size_t rows, std::size_t cols,
                                   double alpha, std::uint64_t seed);

}  // namespace acttail
