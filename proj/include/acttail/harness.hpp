// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "acttail/allocation.hpp"
#include "acttail/tensor_store.hpp"

namespace acttail {

// Per-layer projection set and shapes: q/k/v/o are d_model x d_model,
// gate/up are 4*d_model x d_model, down is d_model x 4*d_model.
inline constexpr Proj kProjOrder[7] = {Proj::q,  Proj::k,    Proj::v,
                                       Proj::o,  Proj::gate, Proj::up,
                                       Proj::down};

/// Synthetic multi-layer stack description with per-(layer, proj) target
/// spectral exponents.
struct StackSpec {
  int layers = 0;
  std::size_t d_model = 0;
  std::vector<double> alphas;  // layers x 7, kProjOrder within each layer
  std::uint64_t seed = 0;

  double alpha(int layer, Proj p) const;
  double& alpha(int layer, Proj p);

  /// All attention projections at alpha_attn, all MLP at alpha_mlp.
  static StackSpec split(int layers, std::size_t d_model, double alpha_attn,
                         double alpha_mlp, std::uint64_t seed);

  void validate() const;
};

/// 7*layers matrices, LLaMA-convention names, deterministic in spec.seed.
std::vector<WeightMatrix> build_stack(const StackSpec& spec);

enum class Method { dense, uniform, acttail };
const char* to_string(Method m);

struct ExperimentResult {
  Method method = Method::dense;
  double global_sparsity = 0.0;
  std::uint64_t seed = 0;
  std::vector<double> layer_mse;  // vs the dense pass, after each layer
  double final_mse = 0.0;
  double rel_err = 0.0;
  double cosine = 1.0;
  double achieved_S = 0.0;
};

/// Seeded standard-Gaussian input batch, row-major batch x d_model.
std::vector<double> gaussian_batch(std::size_t batch, std::size_t d_model,
                                   std::uint64_t seed);

/// Forward pass with per-projection TopK from the plan, compared against the
/// dense pass on the same inputs. A plan with every K = d_in reproduces the
/// dense pass bit-for-bit.
ExperimentResult run_experiment(const std::vector<WeightMatrix>& stack,
                                const AllocationPlan& plan,
                                const std::vector<double>& inputs,
                                std::size_t batch,
                                Method label = Method::acttail);

struct SweepConfig {
  std::size_t batch = 64;
  double k_fraction = 0.5;
  unsigned threads = 0;
};

/// Full method x S x seed cross product (dense rows repeat per S and are
/// identical for a given seed). Row order: S, then seed, then
/// dense/uniform/acttail.
std::vector<ExperimentResult> sweep(const std::vector<WeightMatrix>& stack,
                                    const std::vector<double>& s_grid,
                                    const std::vector<std::uint64_t>& seeds,
                                    const SweepConfig& cfg = {});

void write_sweep_csv(std::ostream& out,
                     const std::vector<ExperimentResult>& rows);
void write_sweep_json(std::ostream& out,
                      const std::vector<ExperimentResult>& rows);

/// Per-projection (layer, proj, alpha, s) table ordered by layer then
/// module type; TSV with plot-ready columns.
void alpha_sparsity_report(std::ostream& out,
                           const std::vector<SpectrumRecord>& records,
                           const AllocationPlan& plan);

}  // namespace acttail
