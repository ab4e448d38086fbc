// SPDX-License-Identifier: Apache-2.0
// acttail: spectral-tail analysis, global TopK sparsity allocation,
// desk-scale evaluation and theory verification, as a file-based pipeline:
//   synth -> analyze -> allocate -> sparsify-eval, plus verify-theory.
#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "acttail/allocation.hpp"
#include "acttail/errors.hpp"
#include "acttail/harness.hpp"
#include "acttail/rng.hpp"
#include "acttail/sparsify.hpp"
#include "acttail/spectral.hpp"
#include "acttail/tensor_store.hpp"
#include "acttail/theory_bench.hpp"

namespace fs = std::filesystem;
using namespace acttail;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitPartial = 2;
constexpr int kExitTheory = 3;

bool g_quiet = false;

void log_info(const std::string& msg) {
  if (!g_quiet) std::cerr << msg << '\n';
}
void log_error(const std::string& msg) { std::cerr << "error: " << msg << '\n'; }

// JSON config files with the same key names as the flags; sections named
// after subcommands apply to that subcommand.
class ConfigJson : public CLI::Config {
 public:
  std::string to_config(const CLI::App*, bool, bool,
                        std::string) const override {
    return "{}\n";
  }
  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const std::exception& e) {
      throw CLI::ConfigError(std::string("config is not valid JSON: ") +
                             e.what());
    }
    std::vector<CLI::ConfigItem> items;
    flatten(j, {}, items);
    return items;
  }

 private:
  static void flatten(const nlohmann::json& j, std::vector<std::string> path,
                      std::vector<CLI::ConfigItem>& items) {
    for (const auto& [key, value] : j.items()) {
      if (value.is_object()) {
        auto sub = path;
        sub.push_back(key);
        flatten(value, sub, items);
      } else {
        CLI::ConfigItem item;
        item.parents = path;
        item.name = key;
        if (value.is_string())
          item.inputs = {value.get<std::string>()};
        else if (value.is_boolean())
          item.inputs = {value.get<bool>() ? "true" : "false"};
        else if (value.is_array())
          for (const auto& v : value)
            item.inputs.push_back(v.is_string() ? v.get<std::string>()
                                                : v.dump());
        else
          item.inputs = {value.dump()};
        items.push_back(std::move(item));
      }
    }
  }
};

// Data always goes to exactly one stream: the file named by --out, or
// stdout for "-". Diagnostics go to stderr.
template <typename Fn>
void with_output(const std::string& out, Fn&& fn) {
  if (out == "-") {
    fn(std::cout);
    std::cout.flush();
    return;
  }
  std::ofstream f(out, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + out);
  fn(f);
  f.flush();
  if (!f) throw IoError("write failed for " + out);
}

std::string sibling_with_extension(const std::string& out,
                                   const std::string& ext) {
  fs::path p(out);
  p.replace_extension(ext);
  return p.string();
}

int run_synth(int layers, std::size_t d_model, double alpha_attn,
              double alpha_mlp, std::uint64_t seed, const std::string& out) {
  const auto spec =
      StackSpec::split(layers, d_model, alpha_attn, alpha_mlp, seed);
  const auto stack = build_stack(spec);
  if (out == "-") {
    // binary stream to stdout
    const auto tmp = fs::temp_directory_path() / "acttail_synth_stdout.tmp";
    save_tensor_file(stack, tmp);
    std::ifstream in(tmp, std::ios::binary);
    std::cout << in.rdbuf();
    std::cout.flush();
    fs::remove(tmp);
  } else {
    save_tensor_file(stack, out);
  }
  log_info("synth: wrote " + std::to_string(stack.size()) + " tensors (" +
           std::to_string(layers) + " layers, d_model " +
           std::to_string(d_model) + ")");
  return kExitOk;
}

int run_analyze(const std::string& weights, double k_fraction,
                bool keep_spectra, const std::string& out, unsigned threads) {
  if (keep_spectra && out == "-")
    throw DomainError("--keep-spectra needs a file --out (sidecar path is "
                      "derived from it)");
  const auto loaded = load_tensor_file(weights);
  for (const auto& s : loaded.skipped)
    log_info("analyze: skipped non-2-D tensor '" + s.name + "' (" + s.reason +
             ")");
  const auto records = analyze_all(loaded.matrices, k_fraction, threads);
  with_output(out, [&](std::ostream& os) { write_spectra_jsonl(os, records); });

  if (keep_spectra) {
    std::vector<WeightMatrix> spectra;
    for (const auto& r : records) {
      if (!r.ok) continue;
      WeightMatrix m;
      m.name = r.name + ".spectrum";
      m.rows = 1;
      m.cols = r.eigenvalues.size();
      m.values = r.eigenvalues;
      spectra.push_back(std::move(m));
    }
    const std::string sidecar = out + ".spectra";
    save_tensor_file(spectra, sidecar);
    log_info("analyze: eigenvalues written to " + sidecar);
  }

  std::size_t failures = 0;
  for (const auto& r : records)
    if (!r.ok) {
      ++failures;
      log_info("analyze: '" + r.name + "' failed: " + r.error);
    }
  log_info("analyze: " + std::to_string(records.size() - failures) + "/" +
           std::to_string(records.size()) + " spectra fitted");
  return failures == 0 ? kExitOk : kExitPartial;
}

int run_allocate(const std::string& spectra, double S, double s1, double s2,
                 double clamp, bool s1_set, bool s2_set,
                 const std::string& out) {
  std::ifstream in(spectra);
  if (!in) throw IoError("cannot open " + spectra);
  const auto all_records = read_spectra_jsonl(in);
  std::vector<SpectrumRecord> records;
  for (const auto& r : all_records) {
    if (r.ok)
      records.push_back(r);
    else
      log_info("allocate: ignoring failed record '" + r.name + "'");
  }
  if (records.empty()) throw DomainError("no usable spectrum records");

  AllocationConfig cfg = AllocationConfig::defaults(S);
  if (s1_set) cfg.s1 = s1;
  if (s2_set) cfg.s2 = s2;
  cfg.clamp_max = clamp;

  const auto plan = allocate(allocation_inputs(records), cfg);
  with_output(out, [&](std::ostream& os) { write_plan_json(os, plan); });
  log_info("allocate: eta = " + std::to_string(plan.eta) +
           ", achieved_S = " + std::to_string(plan.achieved));
  return kExitOk;
}

int run_sparsify_eval(const std::string& weights, const std::string& plan_path,
                      std::size_t batch, std::uint64_t seed,
                      const std::string& out, unsigned /*threads*/) {
  const auto loaded = load_tensor_file(weights);
  std::ifstream pin(plan_path);
  if (!pin) throw IoError("cannot open " + plan_path);
  const auto plan = read_plan_json(pin);

  std::vector<AllocationInput> dims;
  dims.reserve(plan.entries.size());
  for (const auto& e : plan.entries)
    dims.push_back({e.layer, e.proj, e.alpha, e.d_in, e.params});
  const auto dense = uniform_plan(dims, 0.0);
  const auto uniform = uniform_plan(dims, plan.global_sparsity);

  std::size_t d_model = 0;
  for (const auto& m : loaded.matrices)
    if (m.proj == Proj::q) {
      d_model = m.cols;
      break;
    }
  if (d_model == 0) throw DomainError("weights contain no q projection");

  const auto inputs = gaussian_batch(batch, d_model, seed);
  std::vector<ExperimentResult> rows;
  rows.push_back(run_experiment(loaded.matrices, dense, inputs, batch,
                                Method::dense));
  rows.push_back(run_experiment(loaded.matrices, uniform, inputs, batch,
                                Method::uniform));
  rows.push_back(run_experiment(loaded.matrices, plan, inputs, batch,
                                Method::acttail));
  for (auto& r : rows) r.seed = seed;

  with_output(out, [&](std::ostream& os) { write_sweep_csv(os, rows); });
  if (out != "-") {
    const std::string json_out = sibling_with_extension(out, ".json");
    with_output(json_out,
                [&](std::ostream& os) { write_sweep_json(os, rows); });
    log_info("sparsify-eval: JSON mirror at " + json_out);
  }
  log_info("sparsify-eval: final MSE dense/uniform/acttail = " +
           std::to_string(rows[0].final_mse) + " / " +
           std::to_string(rows[1].final_mse) + " / " +
           std::to_string(rows[2].final_mse));
  return kExitOk;
}

int run_verify_theory(std::vector<std::string> checks, std::size_t trials,
                      std::uint64_t seed, const std::string& out) {
  if (checks.empty())
    checks = {"stechkin", "karamata", "weak_lp_membership", "k_rule"};
  for (const auto& c : checks) {
    if (c != "stechkin" && c != "karamata" && c != "weak_lp_membership" &&
        c != "k_rule")
      throw DomainError("unknown check '" + c + "'");
  }

  std::vector<TheoryReport> reports;
  for (const auto& c : checks) {
    if (c == "stechkin") {
      const std::vector<std::size_t> k_grid = {1,   4,    16,   64,
                                               256, 1024, 2048, 4096};
      const std::size_t t = trials == 0 ? 1000 : trials;
      for (const double p : {2.5, 3.0, 4.0, 6.0})
        reports.push_back(check_stechkin(p, 4096, k_grid, t, seed));
    } else if (c == "karamata") {
      const std::vector<double> alphas = {2.1, 2.5, 3.0, 4.0};
      reports.push_back(check_karamata(alphas, 100000, {0.01, 0.3}));
    } else if (c == "weak_lp_membership") {
      const std::size_t t = trials == 0 ? 200 : trials;
      for (const double a : {3.0, 4.0, 6.0})
        reports.push_back(check_weak_lp_membership(a, 4096, t, 0.05, seed));
    } else {
      const std::vector<double> alphas = {2.5, 3.0, 4.0};
      const std::vector<double> eps = {0.25, 0.5};
      const std::size_t t = trials == 0 ? 300 : trials;
      reports.push_back(check_k_rule(alphas, eps, 4096, 0.05, t, seed));
    }
  }

  with_output(out, [&](std::ostream& os) { write_reports_jsonl(os, reports); });
  const std::string md = reports_markdown(reports);
  if (out == "-") {
    if (!g_quiet) std::cerr << md;
  } else {
    const std::string md_out = sibling_with_extension(out, ".md");
    with_output(md_out, [&](std::ostream& os) { os << md; });
    log_info("verify-theory: summary at " + md_out);
  }

  bool all_pass = true;
  for (const auto& r : reports) {
    log_info(std::string("verify-theory: ") + to_string(r.check) + " " +
             (r.pass ? "pass" : "FAIL"));
    if (!r.pass) all_pass = false;
  }
  return all_pass ? kExitOk : kExitTheory;
}

int run_bench_matvec(std::size_t d_in, std::size_t d_out,
                     std::vector<std::size_t> k_list, int repeats,
                     std::uint64_t seed, const std::string& out) {
  Rng rng(seed);
  WeightMatrix w;
  w.name = "bench";
  w.rows = d_out;
  w.cols = d_in;
  w.values.resize(d_in * d_out);
  for (double& x : w.values) x = rng.normal();
  std::vector<double> h(d_in);
  for (double& x : h) x = rng.normal();
  if (k_list.empty())
    k_list = {d_in / 16, d_in / 8, d_in / 4, d_in / 2, d_in};
  const auto rows = timed_project(w, h, k_list, repeats);
  with_output(out, [&](std::ostream& os) { write_timing_csv(os, rows); });
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"heavy-tail guided TopK activation sparsity toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  app.config_formatter(std::make_shared<ConfigJson>());
  app.set_config("--config", "", "JSON config file (same key names as flags)");

  std::uint64_t seed = 0;
  unsigned threads = 0;
  app.add_option("--seed", seed, "seed for every random draw");
  app.add_option("--threads", threads, "worker threads (0 = hardware)")
      ->envname("ACTTAIL_THREADS");
  app.add_flag("--quiet", g_quiet, "suppress diagnostics on stderr");

  // synth
  auto* synth = app.add_subcommand(
      "synth", "generate a synthetic projection stack tensor file");
  int sy_layers = 2;
  std::size_t sy_dmodel = 256;
  double sy_attn = 2.5, sy_mlp = 4.0;
  std::string sy_out = "stack.tensors";
  synth->add_option("--layers", sy_layers, "number of layers")
      ->capture_default_str();
  synth->add_option("--d-model", sy_dmodel, "model width")
      ->capture_default_str();
  synth->add_option("--alpha-attn", sy_attn, "target alpha for q/k/v/o (> 2)")
      ->capture_default_str();
  synth->add_option("--alpha-mlp", sy_mlp, "target alpha for gate/up/down (> 2)")
      ->capture_default_str();
  synth->add_option("--out", sy_out, "output tensor file, or - for stdout")
      ->capture_default_str();

  // analyze
  auto* analyze = app.add_subcommand(
      "analyze", "fit heavy-tail exponents of weight spectra");
  std::string an_weights;
  double an_kfrac = 0.5;
  bool an_keep = false;
  std::string an_out = "-";
  analyze->add_option("weights", an_weights, "tensor file")->required();
  analyze->add_option("--k-fraction", an_kfrac,
                      "Hill tail fraction of the positive spectrum")
      ->capture_default_str();
  analyze->add_flag("--keep-spectra", an_keep,
                    "write eigenvalues to <out>.spectra");
  analyze->add_option("--out", an_out, "spectra JSONL path or -")
      ->capture_default_str();

  // allocate
  auto* alloc = app.add_subcommand(
      "allocate", "map alphas to per-projection sparsity under a budget");
  std::string al_spectra;
  double al_S = 0.5, al_s1 = 0.0, al_s2 = 0.0, al_clamp = 0.99;
  std::string al_out = "-";
  alloc->add_option("spectra", al_spectra, "spectra JSONL from analyze")
      ->required();
  alloc->add_option("--global-sparsity", al_S, "target model-level sparsity S")
      ->required();
  auto* s1_opt = alloc->add_option("--s1", al_s1, "band lower end (default 0.8*S)");
  auto* s2_opt = alloc->add_option("--s2", al_s2, "band upper end (default 1.2*S)");
  alloc->add_option("--clamp", al_clamp, "per-projection sparsity ceiling")
      ->capture_default_str();
  alloc->add_option("--out", al_out, "plan JSON path or -")
      ->capture_default_str();

  // sparsify-eval
  auto* ev = app.add_subcommand(
      "sparsify-eval", "run dense vs uniform vs acttail on the same inputs");
  std::string ev_weights, ev_plan;
  std::size_t ev_batch = 64;
  std::string ev_out = "-";
  ev->add_option("weights", ev_weights, "tensor file")->required();
  ev->add_option("plan", ev_plan, "plan JSON from allocate")->required();
  ev->add_option("--batch", ev_batch, "input vectors per experiment")
      ->capture_default_str();
  ev->add_option("--out", ev_out, "experiment CSV path or -")
      ->capture_default_str();

  // verify-theory
  auto* vt = app.add_subcommand("verify-theory",
                                "numerical checks of the scaling results");
  std::vector<std::string> vt_checks;
  std::size_t vt_trials = 0;
  std::string vt_out = "-";
  vt->add_option("--checks", vt_checks,
                 "subset of: stechkin karamata weak_lp_membership k_rule")
      ->delimiter(',');
  vt->add_option("--trials", vt_trials, "trial count override (0 = defaults)");
  vt->add_option("--out", vt_out, "reports JSONL path or -")
      ->capture_default_str();

  // bench-matvec
  auto* bm = app.add_subcommand("bench-matvec",
                                "time the column-skipping masked matvec");
  std::size_t bm_din = 4096, bm_dout = 4096;
  std::vector<std::size_t> bm_ks;
  int bm_repeats = 9;
  std::string bm_out = "-";
  bm->add_option("--d-in", bm_din, "input width")->capture_default_str();
  bm->add_option("--d-out", bm_dout, "output width")->capture_default_str();
  bm->add_option("--k-list", bm_ks, "K values")->delimiter(',');
  bm->add_option("--repeats", bm_repeats, "timing repeats per K")
      ->capture_default_str();
  bm->add_option("--out", bm_out, "timing CSV path or -")
      ->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth)
      return run_synth(sy_layers, sy_dmodel, sy_attn, sy_mlp, seed, sy_out);
    if (*analyze)
      return run_analyze(an_weights, an_kfrac, an_keep, an_out, threads);
    if (*alloc)
      return run_allocate(al_spectra, al_S, al_s1, al_s2, al_clamp,
                          s1_opt->count() > 0, s2_opt->count() > 0, al_out);
    if (*ev)
      return run_sparsify_eval(ev_weights, ev_plan, ev_batch, seed, ev_out,
                               threads);
    if (*vt) return run_verify_theory(vt_checks, vt_trials, seed, vt_out);
    if (*bm)
      return run_bench_matvec(bm_din, bm_dout, bm_ks, bm_repeats, seed,
                              bm_out);
  } catch (const InfeasibleBudgetError& e) {
    log_error(e.what());
    return kExitUsage;
  } catch (const DomainError& e) {
    log_error(e.what());
    return kExitUsage;
  } catch (const FormatError& e) {
    log_error(e.what());
    return kExitUsage;
  } catch (const IoError& e) {
    log_error(e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    log_error(e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
