// SPDX-License-Identifier: Apache-2.0
#include "acttail/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <json.hpp>
#include <map>
#include <ostream>
#include <sstream>
#include <thread>

#include "acttail/errors.hpp"
#include "acttail/rng.hpp"
#include "acttail/sparsify.hpp"

namespace acttail {

namespace {
using ordered_json = nlohmann::ordered_json;

int proj_index(Proj p) {
  for (int i = 0; i < 7; ++i)
    if (kProjOrder[i] == p) return i;
  return -1;
}

std::string stack_name(int layer, Proj p) {
  const bool attn = p == Proj::q || p == Proj::k || p == Proj::v ||
                    p == Proj::o;
  std::ostringstream os;
  os << "model.layers." << layer << (attn ? ".self_attn." : ".mlp.")
     << to_string(p) << "_proj.weight";
  return os.str();
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace

double StackSpec::alpha(int layer, Proj p) const {
  return alphas[static_cast<std::size_t>(layer) * 7 +
                static_cast<std::size_t>(proj_index(p))];
}

double& StackSpec::alpha(int layer, Proj p) {
  return alphas[static_cast<std::size_t>(layer) * 7 +
                static_cast<std::size_t>(proj_index(p))];
}

StackSpec StackSpec::split(int layers, std::size_t d_model, double alpha_attn,
                           double alpha_mlp, std::uint64_t seed) {
  StackSpec s;
  s.layers = layers;
  s.d_model = d_model;
  s.seed = seed;
  s.alphas.resize(static_cast<std::size_t>(layers) * 7);
  for (int l = 0; l < layers; ++l)
    for (Proj p : kProjOrder)
      s.alpha(l, p) = (p == Proj::gate || p == Proj::up || p == Proj::down)
                          ? alpha_mlp
                          : alpha_attn;
  return s;
}

void StackSpec::validate() const {
  if (layers < 1) throw DomainError("stack: layers must be >= 1");
  if (d_model < 8) throw DomainError("stack: d_model must be >= 8");
  if (alphas.size() != static_cast<std::size_t>(layers) * 7)
    throw DomainError("stack: alpha profile has wrong size");
  for (double a : alphas)
    if (!(a > 2.0)) throw DomainError("stack: every alpha must be > 2");
}

std::vector<WeightMatrix> build_stack(const StackSpec& spec) {
  spec.validate();
  std::vector<WeightMatrix> mats;
  mats.reserve(static_cast<std::size_t>(spec.layers) * 7);
  for (int l = 0; l < spec.layers; ++l) {
    for (Proj p : kProjOrder) {
      std::size_t rows = spec.d_model, cols = spec.d_model;
      if (p == Proj::gate || p == Proj::up) rows = 4 * spec.d_model;
      if (p == Proj::down) {
        rows = spec.d_model;
        cols = 4 * spec.d_model;
      }
      WeightMatrix w = synth_powerlaw_matrix(
          rows, cols, spec.alpha(l, p),
          mix_seed(spec.seed, static_cast<std::uint64_t>(l),
                   static_cast<std::uint64_t>(proj_index(p))));
      w.name = stack_name(l, p);
      w.layer = l;
      w.proj = p;
      mats.push_back(std::move(w));
    }
  }
  return mats;
}

const char* to_string(Method m) {
  switch (m) {
    case Method::dense: return "dense";
    case Method::uniform: return "uniform";
    case Method::acttail: return "acttail";
  }
  return "dense";
}

std::vector<double> gaussian_batch(std::size_t batch, std::size_t d_model,
                                   std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> x(batch * d_model);
  for (double& v : x) v = rng.normal();
  return x;
}

namespace {

struct LayerWeights {
  const WeightMatrix* w[7] = {nullptr};
};

// Index the stack by (layer, proj); every layer must be complete.
std::vector<LayerWeights> index_stack(const std::vector<WeightMatrix>& stack) {
  int max_layer = -1;
  for (const auto& m : stack) max_layer = std::max(max_layer, m.layer);
  std::vector<LayerWeights> layers(max_layer + 1);
  for (const auto& m : stack) {
    const int pi = proj_index(m.proj);
    if (pi < 0)
      throw DomainError("stack: matrix '" + m.name +
                        "' has projection kind 'other'");
    if (layers[m.layer].w[pi] != nullptr)
      throw DomainError("stack: duplicate (layer, proj) for '" + m.name + "'");
    layers[m.layer].w[pi] = &m;
  }
  for (int l = 0; l <= max_layer; ++l)
    for (int pi = 0; pi < 7; ++pi)
      if (layers[l].w[pi] == nullptr)
        throw DomainError("stack: layer " + std::to_string(l) + " lacks " +
                          to_string(kProjOrder[pi]));
  // shape consistency
  const std::size_t d = layers[0].w[0]->cols;
  for (const auto& lw : layers) {
    for (int pi = 0; pi < 4; ++pi)
      if (lw.w[pi]->rows != d || lw.w[pi]->cols != d)
        throw DomainError("stack: attention projections must be square");
    for (int pi = 4; pi < 6; ++pi)
      if (lw.w[pi]->rows != 4 * d || lw.w[pi]->cols != d)
        throw DomainError("stack: gate/up must map d_model -> 4*d_model");
    if (lw.w[6]->rows != d || lw.w[6]->cols != 4 * d)
      throw DomainError("stack: down must map 4*d_model -> d_model");
  }
  return layers;
}

using KMap = std::map<std::pair<int, int>, std::size_t>;

KMap plan_k_map(const AllocationPlan& plan) {
  KMap k;
  for (const auto& e : plan.entries)
    k[{e.layer, proj_index(e.proj)}] = e.K;
  return k;
}

std::size_t k_for(const KMap& k, int layer, int pi) {
  const auto it = k.find({layer, pi});
  if (it == k.end())
    throw DomainError("plan is missing an entry for layer " +
                      std::to_string(layer) + " proj " +
                      std::string(to_string(kProjOrder[pi])));
  return it->second;
}

// One transformer-block-shaped step; every projection input goes through
// its own TopK. No attention scores or KV state, just the projection
// arithmetic (residual + mean-combined attention maps, SwiGLU-style MLP).
void forward_vector(const std::vector<LayerWeights>& layers, const KMap& kmap,
                    std::vector<double>& h,
                    std::vector<std::vector<double>>* per_layer) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerWeights& lw = layers[l];
    const int li = static_cast<int>(l);

    const auto aq = masked_project(*lw.w[0], topk_mask(h, k_for(kmap, li, 0)));
    const auto ak = masked_project(*lw.w[1], topk_mask(h, k_for(kmap, li, 1)));
    const auto av = masked_project(*lw.w[2], topk_mask(h, k_for(kmap, li, 2)));
    std::vector<double> t(h.size());
    for (std::size_t i = 0; i < t.size(); ++i)
      t[i] = (aq[i] + ak[i] + av[i]) / 3.0;
    const auto ao = masked_project(*lw.w[3], topk_mask(t, k_for(kmap, li, 3)));
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += ao[i];

    const auto g = masked_project(*lw.w[4], topk_mask(h, k_for(kmap, li, 4)));
    const auto u = masked_project(*lw.w[5], topk_mask(h, k_for(kmap, li, 5)));
    std::vector<double> m(g.size());
    for (std::size_t i = 0; i < m.size(); ++i)
      m[i] = sigmoid(g[i]) * g[i] * u[i];  // swish gate
    const auto dn = masked_project(*lw.w[6], topk_mask(m, k_for(kmap, li, 6)));
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += dn[i];

    if (per_layer) (*per_layer)[l] = h;
  }
}

}  // namespace

ExperimentResult run_experiment(const std::vector<WeightMatrix>& stack,
                                const AllocationPlan& plan,
                                const std::vector<double>& inputs,
                                std::size_t batch, Method label) {
  const auto layers = index_stack(stack);
  const std::size_t d = layers[0].w[0]->cols;
  if (batch == 0 || inputs.size() != batch * d)
    throw DomainError("run_experiment: inputs must be batch x d_model");
  const KMap kmap = plan_k_map(plan);
  // dense K map: everything kept
  KMap dense_k;
  for (std::size_t l = 0; l < layers.size(); ++l)
    for (int pi = 0; pi < 7; ++pi)
      dense_k[{static_cast<int>(l), pi}] = layers[l].w[pi]->cols;
  // validate coverage up front
  for (std::size_t l = 0; l < layers.size(); ++l)
    for (int pi = 0; pi < 7; ++pi)
      (void)k_for(kmap, static_cast<int>(l), pi);

  const std::size_t L = layers.size();
  std::vector<double> layer_sq(L, 0.0);
  double final_dot = 0.0, final_nd = 0.0, final_ns = 0.0, final_sq = 0.0;

  std::vector<double> h_d(d), h_s(d);
  std::vector<std::vector<double>> out_d(L), out_s(L);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(inputs.begin() + b * d, d, h_d.begin());
    h_s = h_d;
    forward_vector(layers, dense_k, h_d, &out_d);
    forward_vector(layers, kmap, h_s, &out_s);
    for (std::size_t l = 0; l < L; ++l) {
      double sq = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double diff = out_s[l][i] - out_d[l][i];
        sq += diff * diff;
      }
      layer_sq[l] += sq;
    }
    for (std::size_t i = 0; i < d; ++i) {
      final_dot += out_s[L - 1][i] * out_d[L - 1][i];
      final_nd += out_d[L - 1][i] * out_d[L - 1][i];
      final_ns += out_s[L - 1][i] * out_s[L - 1][i];
      const double diff = out_s[L - 1][i] - out_d[L - 1][i];
      final_sq += diff * diff;
    }
  }

  ExperimentResult r;
  r.method = label;
  r.global_sparsity = plan.global_sparsity;
  r.layer_mse.resize(L);
  const double denom = static_cast<double>(batch) * static_cast<double>(d);
  for (std::size_t l = 0; l < L; ++l) r.layer_mse[l] = layer_sq[l] / denom;
  r.final_mse = final_sq / denom;
  r.rel_err = final_nd > 0.0 ? std::sqrt(final_sq / final_nd) : 0.0;
  r.cosine = (final_nd > 0.0 && final_ns > 0.0)
                 ? final_dot / (std::sqrt(final_nd) * std::sqrt(final_ns))
                 : 1.0;
  r.achieved_S = achieved_sparsity(plan.entries);
  return r;
}

std::vector<ExperimentResult> sweep(const std::vector<WeightMatrix>& stack,
                                    const std::vector<double>& s_grid,
                                    const std::vector<std::uint64_t>& seeds,
                                    const SweepConfig& cfg) {
  const auto layers = index_stack(stack);
  const std::size_t d = layers[0].w[0]->cols;

  const auto records = analyze_all(stack, cfg.k_fraction, cfg.threads);
  for (const auto& r : records)
    if (!r.ok)
      throw DomainError("sweep: spectral analysis failed for '" + r.name +
                        "': " + r.error);
  const auto inputs_dims = allocation_inputs(records);

  struct Cell {
    double S;
    std::uint64_t seed;
    Method method;
  };
  std::vector<Cell> cells;
  for (double S : s_grid)
    for (std::uint64_t seed : seeds)
      for (Method m : {Method::dense, Method::uniform, Method::acttail})
        cells.push_back({S, seed, m});

  // plans per S are shared across seeds
  std::map<double, std::pair<AllocationPlan, AllocationPlan>> plans;
  for (double S : s_grid) {
    if (plans.count(S)) continue;
    plans.emplace(S,
                  std::make_pair(uniform_plan(inputs_dims, S),
                                 allocate(inputs_dims,
                                          AllocationConfig::defaults(S))));
  }
  const AllocationPlan dense = uniform_plan(inputs_dims, 0.0);

  std::vector<ExperimentResult> results(cells.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < cells.size();
         i = next.fetch_add(1)) {
      const Cell& c = cells[i];
      const auto inputs = gaussian_batch(cfg.batch, d, c.seed);
      const AllocationPlan* plan = &dense;
      if (c.method == Method::uniform) plan = &plans.at(c.S).first;
      if (c.method == Method::acttail) plan = &plans.at(c.S).second;
      results[i] = run_experiment(stack, *plan, inputs, cfg.batch, c.method);
      results[i].seed = c.seed;
    }
  };
  unsigned nthreads = cfg.threads;
  if (nthreads == 0) {
    const unsigned hw = std::thread::hardware_concurrency();
    nthreads = hw == 0 ? 1 : hw;
  }
  nthreads = std::min<unsigned>(nthreads,
                                static_cast<unsigned>(cells.size()));
  if (nthreads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  return results;
}

namespace {
void csv_row(std::ostream& out, const ExperimentResult& r,
             std::size_t n_layers) {
  out << to_string(r.method) << ',' << r.global_sparsity << ',' << r.seed;
  for (std::size_t l = 0; l < n_layers; ++l) out << ',' << r.layer_mse[l];
  out << ',' << r.final_mse << ',' << r.rel_err << ',' << r.cosine << ','
      << r.achieved_S << '\n';
}
}  // namespace

void write_sweep_csv(std::ostream& out,
                     const std::vector<ExperimentResult>& rows) {
  out << std::setprecision(12);
  if (rows.empty()) {
    out << "method,S,seed,final_mse,rel_err,cosine,achieved_S\n";
    return;
  }
  const std::size_t L = rows.front().layer_mse.size();
  out << "method,S,seed";
  for (std::size_t l = 0; l < L; ++l) out << ",layer_mse_" << l;
  out << ",final_mse,rel_err,cosine,achieved_S\n";
  for (const auto& r : rows) csv_row(out, r, L);
}

void write_sweep_json(std::ostream& out,
                      const std::vector<ExperimentResult>& rows) {
  ordered_json arr = ordered_json::array();
  for (const auto& r : rows) {
    ordered_json j;
    j["method"] = to_string(r.method);
    j["S"] = r.global_sparsity;
    j["seed"] = r.seed;
    j["layer_mse"] = r.layer_mse;
    j["final_mse"] = r.final_mse;
    j["rel_err"] = r.rel_err;
    j["cosine"] = r.cosine;
    j["achieved_S"] = r.achieved_S;
    arr.push_back(std::move(j));
  }
  out << arr.dump(2) << '\n';
}

void alpha_sparsity_report(std::ostream& out,
                           const std::vector<SpectrumRecord>& records,
                           const AllocationPlan& plan) {
  std::map<std::pair<int, int>, const SpectrumRecord*> rec_by_key;
  for (const auto& r : records)
    rec_by_key[{r.layer, proj_index(r.proj)}] = &r;
  std::map<std::pair<int, int>, const AllocationEntry*> ent_by_key;
  for (const auto& e : plan.entries)
    ent_by_key[{e.layer, proj_index(e.proj)}] = &e;

  if (rec_by_key.size() != records.size() ||
      ent_by_key.size() != plan.entries.size())
    throw DomainError("alpha_sparsity_report: duplicate (layer, proj) keys");
  if (rec_by_key.size() != ent_by_key.size())
    throw DomainError("alpha_sparsity_report: record/plan key sets differ");
  for (const auto& [key, rec] : rec_by_key)
    if (!ent_by_key.count(key))
      throw DomainError("alpha_sparsity_report: plan lacks layer " +
                        std::to_string(key.first) + " proj " +
                        to_string(kProjOrder[key.second]));

  out << std::setprecision(12);
  out << "index\tlayer\tproj\talpha\ts\tK\td_in\n";
  std::size_t idx = 0;
  for (const auto& [key, ent] : ent_by_key) {
    out << idx++ << '\t' << key.first << '\t' << to_string(kProjOrder[key.second])
        << '\t' << ent->alpha << '\t' << ent->s << '\t' << ent->K << '\t'
        << ent->d_in << '\n';
  }
}

}  // namespace acttail
