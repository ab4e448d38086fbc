// SPDX-License-Identifier: Apache-2.0
#include "acttail/spectral.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <future>
#include <json.hpp>
#include <ostream>
#include <istream>
#include <thread>

#include "acttail/errors.hpp"

namespace acttail {

namespace {
using ordered_json = nlohmann::ordered_json;

unsigned resolve_threads(unsigned threads) {
  if (threads != 0) return threads;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}
}  // namespace

std::vector<double> correlation_spectrum(const WeightMatrix& w) {
  w.validate();
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                 Eigen::RowMajor>>
      mat(w.values.data(), w.rows, w.cols);
  Eigen::BDCSVD<Eigen::MatrixXd> svd(mat);
  const Eigen::VectorXd& sv = svd.singularValues();  // descending

  std::vector<double> lam(w.cols, 0.0);
  const std::size_t m = std::min(w.rows, w.cols);
  // ascending with the d_in - m exact zeros in front
  for (std::size_t i = 0; i < m; ++i) {
    double l = sv(static_cast<Eigen::Index>(i)) *
               sv(static_cast<Eigen::Index>(i));
    lam[w.cols - 1 - i] = l < 0.0 ? 0.0 : l;
  }
  return lam;
}

HillFit hill_alpha(std::span<const double> eigenvalues, std::size_t k) {
  const std::size_t n = eigenvalues.size();
  if (n < 2) throw DomainError("hill_alpha requires at least 2 eigenvalues");
  if (k < 1 || k > n - 1)
    throw DomainError("hill_alpha: k = " + std::to_string(k) +
                      " out of range [1, " + std::to_string(n - 1) + "]");
  const double ref = eigenvalues[n - 1 - k];  // lambda_{n-k}, 1-based
  if (!(ref > 0.0))
    throw DomainError("hill_alpha: reference eigenvalue is not positive; "
                      "zero-filter the spectrum first");
  double sum = 0.0;
  for (std::size_t i = 1; i <= k; ++i)
    sum += std::log(eigenvalues[n - i] / ref);
  if (sum <= 0.0)
    throw DegenerateSpectrumError(
        "hill_alpha: top-k eigenvalues all equal the cutoff");
  return {1.0 + static_cast<double>(k) / sum, ref};
}

std::vector<SpectrumRecord> analyze_all(
    const std::vector<WeightMatrix>& matrices, double k_fraction,
    unsigned threads) {
  if (!(k_fraction > 0.0 && k_fraction < 1.0))
    throw DomainError("analyze_all: k_fraction must be in (0, 1)");

  std::vector<SpectrumRecord> records(matrices.size());
  const auto analyze_one = [&](std::size_t idx) {
    const WeightMatrix& w = matrices[idx];
    SpectrumRecord rec;
    rec.name = w.name;
    rec.layer = w.layer;
    rec.proj = w.proj;
    rec.rows = w.rows;
    try {
      rec.eigenvalues = correlation_spectrum(w);
      rec.n = rec.eigenvalues.size();
      rec.lambda_max = rec.eigenvalues.back();
      const double threshold = kZeroFilterRel * rec.lambda_max;
      std::size_t n_pos = 0;
      for (double l : rec.eigenvalues)
        if (l > threshold) ++n_pos;
      if (n_pos < 2)
        throw DegenerateSpectrumError("fewer than 2 positive eigenvalues");
      std::size_t k = static_cast<std::size_t>(
          std::floor(k_fraction * static_cast<double>(n_pos)));
      k = std::max<std::size_t>(1, std::min(k, n_pos - 1));
      // positive part is the ascending suffix
      std::span<const double> positive(
          rec.eigenvalues.data() + (rec.n - n_pos), n_pos);
      const HillFit fit = hill_alpha(positive, k);
      rec.alpha = fit.alpha;
      rec.lambda_ref = fit.lambda_ref;
      rec.k_used = k;
      rec.ok = true;
    } catch (const std::exception& e) {
      rec.ok = false;
      rec.error = e.what();
    }
    records[idx] = std::move(rec);
  };

  const unsigned nthreads =
      std::min<unsigned>(resolve_threads(threads),
                         static_cast<unsigned>(std::max<std::size_t>(
                             1, matrices.size())));
  if (nthreads <= 1 || matrices.size() <= 1) {
    for (std::size_t i = 0; i < matrices.size(); ++i) analyze_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < nthreads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < matrices.size();
             i = next.fetch_add(1))
          analyze_one(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  return records;
}

double energy_capture(std::span<const double> eigenvalues, double q) {
  if (eigenvalues.empty()) throw DomainError("energy_capture: empty spectrum");
  if (!(q > 0.0 && q <= 1.0))
    throw DomainError("energy_capture: q must be in (0, 1]");
  std::vector<double> desc(eigenvalues.begin(), eigenvalues.end());
  std::sort(desc.begin(), desc.end(), std::greater<>());
  if (!(desc.front() > 0.0))
    throw DomainError("energy_capture: spectrum has no positive eigenvalue");
  const std::size_t n = desc.size();
  const std::size_t m = static_cast<std::size_t>(
      std::ceil(q * static_cast<double>(n)));
  double top = 0.0, total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total += desc[i];
    if (i < m) top += desc[i];
  }
  return m >= n ? 1.0 : top / total;
}

double weak_lp_norm(std::span<const double> y, double p) {
  if (y.empty()) throw DomainError("weak_lp_norm: empty vector");
  if (!(p > 2.0)) throw DomainError("weak_lp_norm: p must be > 2");
  std::vector<double> mags(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) mags[i] = std::fabs(y[i]);
  std::sort(mags.begin(), mags.end(), std::greater<>());
  double best = 0.0;
  for (std::size_t j = 0; j < mags.size(); ++j) {
    const double v =
        std::pow(static_cast<double>(j + 1), 1.0 / p) * mags[j];
    best = std::max(best, v);
  }
  return best;
}

void write_spectra_jsonl(std::ostream& out,
                         const std::vector<SpectrumRecord>& records) {
  for (const auto& r : records) {
    ordered_json j;
    j["layer"] = r.layer;
    j["proj"] = to_string(r.proj);
    if (r.ok) {
      j["n"] = r.n;
      j["alpha"] = r.alpha;
      j["k_used"] = r.k_used;
      j["lambda_ref"] = r.lambda_ref;
      j["lambda_max"] = r.lambda_max;
      j["rows"] = r.rows;
      j["name"] = r.name;
    } else {
      j["name"] = r.name;
      j["error"] = r.error;
    }
    out << j.dump() << '\n';
  }
}

std::vector<SpectrumRecord> read_spectra_jsonl(std::istream& in) {
  std::vector<SpectrumRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const std::exception& e) {
      throw FormatError(std::string("bad spectra JSONL line: ") + e.what());
    }
    SpectrumRecord r;
    r.layer = j.at("layer").get<int>();
    r.proj = proj_from_string(j.at("proj").get<std::string>());
    if (j.contains("name")) r.name = j["name"].get<std::string>();
    if (j.contains("error")) {
      r.ok = false;
      r.error = j["error"].get<std::string>();
    } else {
      r.ok = true;
      r.n = j.at("n").get<std::size_t>();
      r.alpha = j.at("alpha").get<double>();
      r.k_used = j.at("k_used").get<std::size_t>();
      r.lambda_ref = j.at("lambda_ref").get<double>();
      r.lambda_max = j.at("lambda_max").get<double>();
      if (j.contains("rows")) r.rows = j["rows"].get<std::size_t>();
    }
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace acttail
