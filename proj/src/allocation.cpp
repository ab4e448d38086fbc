// SPDX-License-Identifier: Apache-2.0
#include "acttail/allocation.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <json.hpp>
#include <limits>
#include <ostream>

#include "acttail/errors.hpp"

namespace acttail {

namespace {
using ordered_json = nlohmann::ordered_json;

std::size_t round_half_up_k(double s, std::size_t d_in) {
  const double k = std::floor((1.0 - s) * static_cast<double>(d_in) + 0.5);
  if (k <= 0.0) return 0;
  if (k >= static_cast<double>(d_in)) return d_in;
  return static_cast<std::size_t>(k);
}

void validate_config(const AllocationConfig& cfg) {
  if (!(cfg.global_sparsity >= 0.0 && cfg.global_sparsity < 1.0))
    throw DomainError("allocation: S must be in [0, 1)");
  if (!(cfg.s1 >= 0.0 && cfg.s2 >= cfg.s1))
    throw DomainError("allocation: need 0 <= s1 <= s2");
  if (!(cfg.clamp_max > 0.0 && cfg.clamp_max <= 1.0))
    throw DomainError("allocation: clamp_max must be in (0, 1]");
}
}  // namespace

double achieved_sparsity(const std::vector<AllocationEntry>& entries) {
  double num = 0.0, den = 0.0;
  for (const auto& e : entries) {
    const double s_int =
        1.0 - static_cast<double>(e.K) / static_cast<double>(e.d_in);
    num += s_int * static_cast<double>(e.params);
    den += static_cast<double>(e.params);
  }
  return den == 0.0 ? 0.0 : num / den;
}

std::vector<AllocationInput> allocation_inputs(
    const std::vector<SpectrumRecord>& records) {
  std::vector<AllocationInput> inputs;
  inputs.reserve(records.size());
  for (const auto& r : records) {
    if (!r.ok)
      throw DomainError("allocation: record '" + r.name +
                        "' is a failure entry (" + r.error + ")");
    if (r.n == 0 || r.rows == 0)
      throw DomainError("allocation: record '" + r.name +
                        "' lacks dimensions");
    inputs.push_back({r.layer, r.proj, r.alpha, r.n, r.rows * r.n});
  }
  return inputs;
}

AllocationPlan allocate(const std::vector<AllocationInput>& inputs,
                        const AllocationConfig& cfg) {
  validate_config(cfg);
  if (inputs.empty()) throw DomainError("allocation: no entries");

  double alpha_min = std::numeric_limits<double>::infinity();
  double alpha_max = -std::numeric_limits<double>::infinity();
  double total_params = 0.0;
  for (const auto& in : inputs) {
    if (!std::isfinite(in.alpha))
      throw DomainError("allocation: non-finite alpha");
    if (in.d_in == 0 || in.params == 0)
      throw DomainError("allocation: zero-dimension entry");
    alpha_min = std::min(alpha_min, in.alpha);
    alpha_max = std::max(alpha_max, in.alpha);
    total_params += static_cast<double>(in.params);
  }

  const double S = cfg.global_sparsity;
  std::vector<double> raw(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    raw[i] = alpha_max > alpha_min
                 ? (inputs[i].alpha - alpha_min) / (alpha_max - alpha_min) *
                           (cfg.s2 - cfg.s1) +
                       cfg.s1
                 : 0.5 * (cfg.s1 + cfg.s2);
  }

  // feasibility: even with every positive-raw entry clamped, can the budget
  // be met?
  const double target = S * total_params;
  double clampable = 0.0;
  double min_pos_raw = std::numeric_limits<double>::infinity();
  double weighted_raw = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const double d = static_cast<double>(inputs[i].params);
    weighted_raw += raw[i] * d;
    if (raw[i] > 0.0) {
      clampable += cfg.clamp_max * d;
      min_pos_raw = std::min(min_pos_raw, raw[i]);
    }
  }
  if (clampable < target * (1.0 - 1e-15)) {
    const double min_clamp =
        clampable > 0.0 ? target / (clampable / cfg.clamp_max) : 1.0;
    throw InfeasibleBudgetError(
        "allocation: global sparsity " + std::to_string(S) +
            " infeasible under clamp " + std::to_string(cfg.clamp_max) +
            "; minimal feasible clamp is " + std::to_string(min_clamp),
        min_clamp);
  }

  // degenerate spread: every raw_s is identical, so the budget forces
  // s_i = S exactly (uniform fallback)
  if (alpha_max <= alpha_min) {
    AllocationPlan plan;
    plan.global_sparsity = S;
    const double raw0 = 0.5 * (cfg.s1 + cfg.s2);
    plan.eta = raw0 > 0.0 ? S / raw0 : 0.0;
    plan.entries.reserve(inputs.size());
    for (const auto& input : inputs) {
      AllocationEntry e;
      e.layer = input.layer;
      e.proj = input.proj;
      e.alpha = input.alpha;
      e.d_in = input.d_in;
      e.params = input.params;
      e.raw_s = raw0;
      e.s = S;
      e.K = round_half_up_k(S, input.d_in);
      plan.entries.push_back(e);
    }
    plan.achieved = achieved_sparsity(plan.entries);
    return plan;
  }

  double eta;
  if (target == 0.0) {
    eta = 0.0;
  } else {
    // closed form first; valid when nothing clamps
    eta = target / weighted_raw;
    bool clamped = false;
    for (std::size_t i = 0; i < inputs.size(); ++i)
      if (eta * raw[i] > cfg.clamp_max) clamped = true;
    if (clamped) {
      // g(eta) = sum min(eta*raw, clamp)*d is monotone; bisect
      double lo = 0.0, hi = cfg.clamp_max / min_pos_raw;
      double mid = 0.5 * (lo + hi);
      const double tol = 1e-12 * total_params;
      for (int it = 0; it < 200; ++it) {
        mid = 0.5 * (lo + hi);
        double g = 0.0;
        for (std::size_t i = 0; i < inputs.size(); ++i)
          g += std::min(mid * raw[i], cfg.clamp_max) *
               static_cast<double>(inputs[i].params);
        if (std::fabs(g - target) < tol) break;
        if (g < target)
          lo = mid;
        else
          hi = mid;
      }
      eta = mid;
    }
  }

  AllocationPlan plan;
  plan.global_sparsity = S;
  plan.eta = eta;
  plan.entries.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    AllocationEntry e;
    e.layer = inputs[i].layer;
    e.proj = inputs[i].proj;
    e.alpha = inputs[i].alpha;
    e.d_in = inputs[i].d_in;
    e.params = inputs[i].params;
    e.raw_s = raw[i];
    e.s = std::min(eta * raw[i], cfg.clamp_max);
    e.K = round_half_up_k(e.s, e.d_in);
    plan.entries.push_back(e);
  }
  plan.achieved = achieved_sparsity(plan.entries);
  return plan;
}

AllocationPlan uniform_plan(const std::vector<AllocationInput>& dims,
                            double S) {
  if (!(S >= 0.0 && S < 1.0))
    throw DomainError("uniform_plan: S must be in [0, 1)");
  AllocationPlan plan;
  plan.global_sparsity = S;
  plan.eta = 1.0;
  plan.entries.reserve(dims.size());
  for (const auto& in : dims) {
    AllocationEntry e;
    e.layer = in.layer;
    e.proj = in.proj;
    e.alpha = in.alpha;
    e.d_in = in.d_in;
    e.params = in.params;
    e.raw_s = S;
    e.s = S;
    e.K = round_half_up_k(S, in.d_in);
    plan.entries.push_back(e);
  }
  plan.achieved = achieved_sparsity(plan.entries);
  return plan;
}

std::size_t theoretical_k(double alpha, double epsilon, std::size_t d_out,
                          double delta) {
  if (!(alpha > 2.0)) throw DomainError("theoretical_k: alpha must be > 2");
  if (!(epsilon > 0.0)) throw DomainError("theoretical_k: epsilon must be > 0");
  if (!(delta > 0.0 && delta < 1.0))
    throw DomainError("theoretical_k: delta must be in (0, 1)");
  if (d_out == 0) throw DomainError("theoretical_k: d_out must be positive");

  const double base =
      std::sqrt(std::log(static_cast<double>(d_out) / delta)) / epsilon;
  const double expo = 2.0 * (alpha - 1.0) / (alpha - 2.0);
  const double k = std::pow(base, expo);
  if (!std::isfinite(k) || k >= static_cast<double>(d_out)) return d_out;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(k)));
}

void write_plan_json(std::ostream& out, const AllocationPlan& plan) {
  ordered_json j;
  j["global_sparsity"] = plan.global_sparsity;
  j["eta"] = plan.eta;
  j["achieved"] = plan.achieved;
  j["entries"] = ordered_json::array();
  for (const auto& e : plan.entries) {
    ordered_json je;
    je["layer"] = e.layer;
    je["proj"] = to_string(e.proj);
    je["alpha"] = e.alpha;
    je["d_in"] = e.d_in;
    je["params"] = e.params;
    je["s"] = e.s;
    je["K"] = e.K;
    j["entries"].push_back(std::move(je));
  }
  out << j.dump(2) << '\n';
}

AllocationPlan read_plan_json(std::istream& in) {
  ordered_json j;
  try {
    j = ordered_json::parse(in);
  } catch (const std::exception& e) {
    throw FormatError(std::string("bad plan JSON: ") + e.what());
  }
  AllocationPlan plan;
  plan.global_sparsity = j.at("global_sparsity").get<double>();
  plan.eta = j.at("eta").get<double>();
  plan.achieved = j.at("achieved").get<double>();
  for (const auto& je : j.at("entries")) {
    AllocationEntry e;
    e.layer = je.at("layer").get<int>();
    e.proj = proj_from_string(je.at("proj").get<std::string>());
    e.alpha = je.at("alpha").get<double>();
    e.d_in = je.at("d_in").get<std::size_t>();
    e.params = je.at("params").get<std::size_t>();
    e.s = je.at("s").get<double>();
    e.K = je.at("K").get<std::size_t>();
    e.raw_s = e.s;
    plan.entries.push_back(e);
  }
  return plan;
}

}  // namespace acttail
