// SPDX-License-Identifier: Apache-2.0
#include "acttail/theory_bench.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <ostream>
#include <sstream>

#include "acttail/allocation.hpp"
#include "acttail/errors.hpp"
#include "acttail/rng.hpp"
#include "acttail/sparsify.hpp"
#include "acttail/spectral.hpp"
#include "acttail/tensor_store.hpp"

namespace acttail {

namespace {
using ordered_json = nlohmann::ordered_json;

double lstsq_slope(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  const double nn = static_cast<double>(n);
  return (nn * sxy - sx * sy) / (nn * sxx - sx * sx);
}

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

// Sorted-descending magnitudes of y.
std::vector<double> sorted_mags(std::span<const double> y) {
  std::vector<double> m(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) m[i] = std::fabs(y[i]);
  std::sort(m.begin(), m.end(), std::greater<>());
  return m;
}

// Envelope constant of one draw: max_j |y|_(j) j^(1/p) / sqrt(ln(d/delta)).
double envelope_constant(const std::vector<double>& mags_desc, double p,
                         double sqrt_log) {
  double best = 0.0;
  for (std::size_t j = 0; j < mags_desc.size(); ++j)
    best = std::max(best, std::pow(static_cast<double>(j + 1), 1.0 / p) *
                              mags_desc[j]);
  return best / sqrt_log;
}

double quantile_upper(std::vector<double> v, double level) {
  // smallest value covering >= level fraction of the sample
  std::sort(v.begin(), v.end());
  const std::size_t idx = std::min(
      v.size() - 1, static_cast<std::size_t>(
                        std::ceil(level * static_cast<double>(v.size())) - 1));
  return v[idx];
}

struct SynthDraw {
  WeightMatrix w;
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                 Eigen::RowMajor>>
      map;
  explicit SynthDraw(WeightMatrix&& m)
      : w(std::move(m)), map(w.values.data(), w.rows, w.cols) {}
};

std::size_t bench_d_in(std::size_t d_out) {
  return std::min(d_out, std::max<std::size_t>(64, d_out / 8));
}
}  // namespace

const char* to_string(CheckName c) {
  switch (c) {
    case CheckName::stechkin: return "stechkin";
    case CheckName::karamata: return "karamata";
    case CheckName::weak_lp_membership: return "weak_lp_membership";
    case CheckName::k_rule: return "k_rule";
  }
  return "unknown";
}

TheoryReport check_stechkin(double p, std::size_t d,
                            std::span<const std::size_t> k_grid,
                            std::size_t trials, std::uint64_t seed) {
  if (!(p > 2.0)) throw DomainError("check_stechkin: p must be > 2");
  if (d < 2 || k_grid.empty() || trials == 0)
    throw DomainError("check_stechkin: bad grid");
  for (std::size_t k : k_grid)
    if (k < 1 || k > d) throw DomainError("check_stechkin: K out of range");

  const double cp = std::sqrt(p / (p - 2.0));
  Rng rng(seed);

  std::size_t viol_nom = 0, viol_fd = 0;
  double max_ratio_nom = 0.0, max_ratio_fd = 0.0;
  std::size_t first_viol_k = 0;

  std::vector<double> y(d);
  for (std::size_t t = 0; t < trials; ++t) {
    for (std::size_t j = 0; j < d; ++j) {
      const double u = rng.uniform(0.5, 1.0);
      const double sign = (rng.bits() & 1u) ? 1.0 : -1.0;
      y[j] = sign * u * std::pow(static_cast<double>(j + 1), -1.0 / p);
    }
    // Fisher-Yates; the check must exercise magnitude ranking, not position
    for (std::size_t j = d - 1; j > 0; --j) {
      const std::size_t r = rng.below(j + 1);
      std::swap(y[j], y[r]);
    }
    // one sort per trial; suffix sums give every truncation error at once
    const std::vector<double> mags = sorted_mags(y);
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j)
      norm = std::max(norm, std::pow(static_cast<double>(j + 1), 1.0 / p) *
                                mags[j]);
    std::vector<double> suffix(d + 1, 0.0);
    for (std::size_t j = d; j > 0; --j)
      suffix[j - 1] = suffix[j] + mags[j - 1] * mags[j - 1];
    for (std::size_t K : k_grid) {
      const double err = std::sqrt(suffix[K]);
      const double bound_nom =
          cp * norm * std::pow(static_cast<double>(K), 0.5 - 1.0 / p);
      const double tail_gap =
          std::pow(static_cast<double>(d), 1.0 - 2.0 / p) -
          std::pow(static_cast<double>(K), 1.0 - 2.0 / p);
      const double bound_fd = cp * norm * std::sqrt(std::max(0.0, tail_gap));
      if (err > bound_nom) {
        ++viol_nom;
        if (first_viol_k == 0 || K < first_viol_k) first_viol_k = K;
      }
      if (err > bound_fd) ++viol_fd;
      if (bound_nom > 0.0)
        max_ratio_nom = std::max(max_ratio_nom, err / bound_nom);
      if (bound_fd > 0.0) max_ratio_fd = std::max(max_ratio_fd, err / bound_fd);
    }
  }

  TheoryReport rep;
  rep.check = CheckName::stechkin;
  rep.trials = trials;
  rep.seed = seed;
  rep.predicted = 1.0;
  rep.measured = max_ratio_nom;
  rep.ratio = max_ratio_nom;
  rep.pass = viol_nom == 0;
  rep.parameters = {
      {"p", p},
      {"d", static_cast<double>(d)},
      {"violations_nominal", static_cast<double>(viol_nom)},
      {"violations_finite_d", static_cast<double>(viol_fd)},
      {"max_ratio_nominal", max_ratio_nom},
      {"max_ratio_finite_d", max_ratio_fd},
      {"first_violating_K", static_cast<double>(first_viol_k)},
      {"k_validity_threshold",
       static_cast<double>(d) * std::pow(2.0, -p / (p - 2.0))},
  };
  rep.notes.push_back(
      "constant corrected to sqrt(p/(p-2)); sqrt(p/(2-p)) is imaginary for "
      "p > 2");
  if (viol_nom > 0) {
    rep.notes.push_back(
        "the K^(1/2-1/p) form fails for K below ~d*2^(-p/(p-2)): for p > 2 "
        "the tail sum is dominated by its d-dependent end, not by K");
    rep.notes.push_back(
        "finite-d bound sqrt(p/(p-2))*||y||*sqrt(d^(1-2/p)-K^(1-2/p)) held " +
        std::string(viol_fd == 0 ? "with zero violations" : "WITH VIOLATIONS"));
  }
  return rep;
}

TheoryReport check_karamata(std::span<const double> alpha_grid, std::size_t n,
                            std::pair<double, double> q_range) {
  if (n < 1000) throw DomainError("check_karamata: n must be >= 1000");
  const auto [q_lo, q_hi] = q_range;
  if (!(q_lo > 0.0 && q_lo < q_hi && q_hi < 0.5))
    throw DomainError("check_karamata: q_range must be within (0, 0.5)");
  if (alpha_grid.empty()) throw DomainError("check_karamata: empty grid");

  TheoryReport rep;
  rep.check = CheckName::karamata;
  rep.trials = 0;
  rep.seed = 0;
  rep.pass = true;

  double worst_dev = -1.0;
  constexpr int kQPoints = 25;
  std::vector<double> lam(n), logq(kQPoints), logR(kQPoints);

  for (double alpha : alpha_grid) {
    if (!(alpha > 2.0)) throw DomainError("check_karamata: alpha must be > 2");
    for (std::size_t j = 0; j < n; ++j)
      lam[j] = std::pow(static_cast<double>(j + 1), -1.0 / (alpha - 1.0));
    for (int i = 0; i < kQPoints; ++i) {
      const double f = static_cast<double>(i) / (kQPoints - 1);
      const double q = q_lo * std::pow(q_hi / q_lo, f);
      logq[i] = std::log(q);
      logR[i] = std::log(energy_capture(lam, q));
    }
    const double slope = lstsq_slope(logq, logR);
    const double target = (alpha - 2.0) / (alpha - 1.0);
    const bool near_pole = alpha <= 2.2;
    const double tol = near_pole ? 0.1 : 0.05;
    const double dev = std::fabs(slope - target);
    rep.parameters.emplace_back("slope[alpha=" + fmt(alpha) + "]", slope);
    rep.parameters.emplace_back("target[alpha=" + fmt(alpha) + "]", target);
    if (near_pole)
      rep.notes.push_back("alpha=" + fmt(alpha) +
                          ": near-pole regime, tolerance widened to 0.1");
    if (dev > tol) rep.pass = false;
    if (dev > worst_dev) {
      worst_dev = dev;
      rep.predicted = target;
      rep.measured = slope;
      rep.ratio = target != 0.0 ? slope / target : 0.0;
    }
  }
  rep.parameters.emplace_back("n", static_cast<double>(n));
  rep.parameters.emplace_back("q_lo", q_lo);
  rep.parameters.emplace_back("q_hi", q_hi);
  return rep;
}

TheoryReport check_weak_lp_membership(double alpha, std::size_t d_out,
                                      std::size_t trials, double delta,
                                      std::uint64_t seed) {
  if (!(alpha > 2.0))
    throw DomainError("check_weak_lp_membership: alpha must be > 2");
  if (d_out < 200 || trials < 10)
    throw DomainError("check_weak_lp_membership: d_out/trials too small");
  if (!(delta > 0.0 && delta < 1.0))
    throw DomainError("check_weak_lp_membership: delta must be in (0, 1)");

  const double p = 2.0 * (alpha - 1.0);
  const double sqrt_log =
      std::sqrt(std::log(static_cast<double>(d_out) / delta));
  const std::size_t d_in = bench_d_in(d_out);

  SynthDraw W(synth_powerlaw_matrix(d_out, d_in, alpha, mix_seed(seed, 1)));
  Rng rng(mix_seed(seed, 2));

  std::vector<std::vector<double>> profiles(trials);
  std::vector<double> constants(trials);
  Eigen::VectorXd x(static_cast<Eigen::Index>(d_in));
  for (std::size_t t = 0; t < trials; ++t) {
    for (std::size_t i = 0; i < d_in; ++i)
      x(static_cast<Eigen::Index>(i)) = rng.normal();
    const Eigen::VectorXd y = W.map * x;
    profiles[t] = sorted_mags({y.data(), static_cast<std::size_t>(y.size())});
    constants[t] = envelope_constant(profiles[t], p, sqrt_log);
  }
  const double env_c = quantile_upper(constants, 1.0 - delta);

  // median order-statistic profile
  std::vector<double> med(d_out), tmp(trials);
  for (std::size_t j = 0; j < d_out; ++j) {
    for (std::size_t t = 0; t < trials; ++t) tmp[t] = profiles[t][j];
    std::nth_element(tmp.begin(), tmp.begin() + trials / 2, tmp.end());
    med[j] = tmp[trials / 2];
  }

  const std::size_t j_lo = std::max<std::size_t>(1, d_out / 100);
  const std::size_t j_hi = d_out / 2;
  std::vector<double> lx, ly;
  for (std::size_t j = j_lo; j <= j_hi; ++j) {
    if (med[j - 1] <= 0.0) continue;
    lx.push_back(std::log(static_cast<double>(j)));
    ly.push_back(std::log(med[j - 1]));
  }
  const double slope = lstsq_slope(lx, ly);
  const double target = -1.0 / p;

  // Assumption-1 comparability: diag(WW^T) rearranged vs the spectrum,
  // over the numerical rank.
  std::vector<double> vdiag(d_out, 0.0);
  for (std::size_t i = 0; i < d_out; ++i) {
    const double* row = W.w.values.data() + i * d_in;
    double s = 0.0;
    for (std::size_t j = 0; j < d_in; ++j) s += row[j] * row[j];
    vdiag[i] = s;
  }
  std::sort(vdiag.begin(), vdiag.end(), std::greater<>());
  double gamma_max = 0.0;
  for (std::size_t j = 0; j < std::min(d_in, d_out); ++j) {
    const double sig2 =
        std::pow(static_cast<double>(j + 1), -1.0 / (alpha - 1.0));
    gamma_max = std::max(gamma_max, vdiag[j] / sig2);
  }

  // Diagnostic: the variance-aligned model y_j = sigma_j z_j shows the
  // predicted exponent in its deep tail (j <= d/100), where ranking is
  // driven by the sigma profile rather than by the Gaussian noise.
  double tail_slope = 0.0;
  {
    Rng rng2(mix_seed(seed, 3));
    std::vector<std::vector<double>> prof(trials);
    std::vector<double> z(d_out);
    for (std::size_t t = 0; t < trials; ++t) {
      for (std::size_t j = 0; j < d_out; ++j)
        z[j] = std::pow(static_cast<double>(j + 1), -0.5 / (alpha - 1.0)) *
               std::fabs(rng2.normal());
      std::sort(z.begin(), z.end(), std::greater<>());
      prof[t] = z;
    }
    const std::size_t t_hi = std::max<std::size_t>(2, d_out / 100);
    std::vector<double> tx, ty, col(trials);
    for (std::size_t j = 1; j <= t_hi; ++j) {
      for (std::size_t t = 0; t < trials; ++t) col[t] = prof[t][j - 1];
      std::nth_element(col.begin(), col.begin() + trials / 2, col.end());
      tx.push_back(std::log(static_cast<double>(j)));
      ty.push_back(std::log(col[trials / 2]));
    }
    tail_slope = lstsq_slope(tx, ty);
  }

  TheoryReport rep;
  rep.check = CheckName::weak_lp_membership;
  rep.trials = trials;
  rep.seed = seed;
  rep.predicted = target;
  rep.measured = slope;
  rep.ratio = target != 0.0 ? slope / target : 0.0;
  const bool slope_ok = std::fabs(slope - target) <= 0.1;
  rep.pass = std::isfinite(env_c) && slope_ok;
  rep.parameters = {
      {"alpha", alpha},
      {"d_out", static_cast<double>(d_out)},
      {"d_in", static_cast<double>(d_in)},
      {"p", p},
      {"delta", delta},
      {"envelope_C", env_c},
      {"slope", slope},
      {"slope_target", target},
      {"gamma_max_ratio", gamma_max},
      {"tail_slope_aligned", tail_slope},
  };
  rep.notes.push_back("envelope constant is finite and calibrated at the " +
                      fmt(1.0 - delta) + " quantile");
  if (!slope_ok) {
    rep.notes.push_back(
        "median-profile slope is dominated by order-statistic ranking noise "
        "(~ -0.39 for any alpha); the j^(-1/(2(alpha-1))) exponent is an "
        "envelope property, visible in the aligned-model deep tail "
        "(tail_slope_aligned)");
  }
  return rep;
}

TheoryReport check_k_rule(std::span<const double> alpha_grid,
                          std::span<const double> eps_grid, std::size_t d_out,
                          double delta, std::size_t trials,
                          std::uint64_t seed) {
  if (alpha_grid.empty() || eps_grid.empty())
    throw DomainError("check_k_rule: empty grid");
  if (!(delta > 0.0 && delta < 1.0))
    throw DomainError("check_k_rule: delta must be in (0, 1)");
  if (trials < 10) throw DomainError("check_k_rule: trials too small");

  const double sqrt_log =
      std::sqrt(std::log(static_cast<double>(d_out) / delta));

  TheoryReport rep;
  rep.check = CheckName::k_rule;
  rep.trials = trials;
  rep.seed = seed;
  rep.pass = true;
  rep.predicted = 1.0 - delta;
  rep.measured = 1.0;

  const std::size_t d_in = bench_d_in(d_out);

  std::size_t ai = 0;
  for (double alpha : alpha_grid) {
    if (!(alpha > 2.0)) throw DomainError("check_k_rule: alpha must be > 2");
    const double p = 2.0 * (alpha - 1.0);
    SynthDraw W(
        synth_powerlaw_matrix(d_out, d_in, alpha, mix_seed(seed, 10 + ai)));

    // held-out calibration batch for the envelope constant
    Rng cal_rng(mix_seed(seed, 20 + ai));
    std::vector<double> constants(trials);
    Eigen::VectorXd x(static_cast<Eigen::Index>(d_in));
    for (std::size_t t = 0; t < trials; ++t) {
      for (std::size_t i = 0; i < d_in; ++i)
        x(static_cast<Eigen::Index>(i)) = cal_rng.normal();
      const Eigen::VectorXd y = W.map * x;
      constants[t] = envelope_constant(
          sorted_mags({y.data(), static_cast<std::size_t>(y.size())}), p,
          sqrt_log);
    }
    const double c_cal = quantile_upper(constants, 1.0 - delta);

    Rng test_rng(mix_seed(seed, 30 + ai));
    std::vector<std::vector<double>> ys(trials);
    for (std::size_t t = 0; t < trials; ++t) {
      for (std::size_t i = 0; i < d_in; ++i)
        x(static_cast<Eigen::Index>(i)) = test_rng.normal();
      const Eigen::VectorXd y = W.map * x;
      ys[t].assign(y.data(), y.data() + y.size());
    }

    for (double eps : eps_grid) {
      const std::size_t K = theoretical_k(alpha, eps, d_out, delta);
      const double raw =
          std::pow(sqrt_log / eps, 2.0 * (alpha - 1.0) / (alpha - 2.0));
      const bool capped = !(raw < static_cast<double>(d_out));
      std::size_t ok = 0;
      for (std::size_t t = 0; t < trials; ++t) {
        const double err = truncation_error(ys[t], K) / c_cal;
        if (err <= eps) ++ok;
      }
      const double rate =
          static_cast<double>(ok) / static_cast<double>(trials);
      const std::string tag =
          "[alpha=" + fmt(alpha) + ",eps=" + fmt(eps) + "]";
      rep.parameters.emplace_back("rate" + tag, rate);
      rep.parameters.emplace_back("K" + tag, static_cast<double>(K));
      if (capped)
        rep.notes.push_back("K" + tag + " capped at d_out (rule gives " +
                            fmt(raw) + ")");
      if (rate < 1.0 - delta) rep.pass = false;
      rep.measured = std::min(rep.measured, rate);
    }
    rep.parameters.emplace_back("envelope_C[alpha=" + fmt(alpha) + "]", c_cal);
    ++ai;
  }
  rep.parameters.emplace_back("d_out", static_cast<double>(d_out));
  rep.parameters.emplace_back("d_in", static_cast<double>(d_in));
  rep.parameters.emplace_back("delta", delta);
  rep.ratio = rep.predicted != 0.0 ? rep.measured / rep.predicted : 0.0;
  return rep;
}

void write_reports_jsonl(std::ostream& out,
                         const std::vector<TheoryReport>& reports) {
  for (const auto& r : reports) {
    ordered_json j;
    j["check"] = to_string(r.check);
    j["pass"] = r.pass;
    j["predicted"] = r.predicted;
    j["measured"] = r.measured;
    j["ratio"] = r.ratio;
    j["trials"] = r.trials;
    j["seed"] = r.seed;
    ordered_json params = ordered_json::object();
    for (const auto& [k, v] : r.parameters) params[k] = v;
    j["parameters"] = std::move(params);
    j["notes"] = r.notes;
    out << j.dump() << '\n';
  }
}

std::string reports_markdown(const std::vector<TheoryReport>& reports) {
  std::ostringstream os;
  os << "| check | pass | predicted | measured | ratio | trials |\n";
  os << "|---|---|---|---|---|---|\n";
  for (const auto& r : reports) {
    os << "| " << to_string(r.check) << " | " << (r.pass ? "yes" : "NO")
       << " | " << r.predicted << " | " << r.measured << " | " << r.ratio
       << " | " << r.trials << " |\n";
  }
  os << '\n';
  for (const auto& r : reports) {
    if (r.notes.empty()) continue;
    os << "**" << to_string(r.check) << "**\n";
    for (const auto& n : r.notes) os << "- " << n << '\n';
    os << '\n';
  }
  return os.str();
}

}  // namespace acttail
