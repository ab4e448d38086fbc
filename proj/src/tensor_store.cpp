// SPDX-License-Identifier: Apache-2.0
#include "acttail/tensor_store.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>

#include "acttail/errors.hpp"
#include "acttail/rng.hpp"

namespace acttail {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr std::size_t kHeaderLenBytes = 8;

double half_to_double(std::uint16_t h) {
  const std::uint32_t sign = (h >> 15) & 1u;
  const std::uint32_t expo = (h >> 10) & 0x1fu;
  const std::uint32_t mant = h & 0x3ffu;
  double v;
  if (expo == 0) {
    v = std::ldexp(static_cast<double>(mant), -24);  // subnormal or zero
  } else if (expo == 31) {
    v = mant == 0 ? std::numeric_limits<double>::infinity()
                  : std::numeric_limits<double>::quiet_NaN();
  } else {
    v = std::ldexp(static_cast<double>(mant) + 1024.0,
                   static_cast<int>(expo) - 25);
  }
  return sign ? -v : v;
}

std::uint64_t read_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

struct Entry {
  std::string name;
  std::string dtype;
  std::vector<std::uint64_t> shape;
  std::uint64_t begin = 0, end = 0;
};

}  // namespace

const char* to_string(Proj p) {
  switch (p) {
    case Proj::q: return "q";
    case Proj::k: return "k";
    case Proj::v: return "v";
    case Proj::o: return "o";
    case Proj::gate: return "gate";
    case Proj::up: return "up";
    case Proj::down: return "down";
    case Proj::other: return "other";
  }
  return "other";
}

Proj proj_from_string(std::string_view s) {
  for (Proj p : {Proj::q, Proj::k, Proj::v, Proj::o, Proj::gate, Proj::up,
                 Proj::down, Proj::other}) {
    if (s == to_string(p)) return p;
  }
  throw DomainError("unknown projection kind: " + std::string(s));
}

void WeightMatrix::validate() const {
  if (rows == 0 || cols == 0)
    throw DomainError("matrix '" + name + "' has a zero dimension");
  if (values.size() != rows * cols)
    throw DomainError("matrix '" + name + "' has " +
                      std::to_string(values.size()) + " values, expected " +
                      std::to_string(rows * cols));
  for (double v : values) {
    if (!std::isfinite(v))
      throw DomainError("matrix '" + name + "' contains non-finite values");
  }
}

std::pair<int, Proj> parse_name(std::string_view raw) {
  int layer = 0;
  const auto pos = raw.find("layers.");
  if (pos != std::string_view::npos) {
    std::size_t i = pos + 7;
    long v = 0;
    bool any = false;
    while (i < raw.size() && raw[i] >= '0' && raw[i] <= '9') {
      v = v * 10 + (raw[i] - '0');
      if (v > 1000000) break;
      ++i;
      any = true;
    }
    if (any) layer = static_cast<int>(v);
  }
  static constexpr std::pair<std::string_view, Proj> kPatterns[] = {
      {"q_proj", Proj::q},       {"k_proj", Proj::k},
      {"v_proj", Proj::v},       {"o_proj", Proj::o},
      {"gate_proj", Proj::gate}, {"up_proj", Proj::up},
      {"down_proj", Proj::down},
  };
  Proj proj = Proj::other;
  for (const auto& [pat, p] : kPatterns) {
    if (raw.find(pat) != std::string_view::npos) {
      // "up_proj" is a substring of "gate_proj"? No, but guard k_proj
      // matching inside "topk_proj"-style names is not worth it; the seven
      // patterns are mutually exclusive in practice.
      proj = p;
      break;
    }
  }
  return {layer, proj};
}

LoadResult load_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const std::uint64_t file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0, std::ios::beg);

  if (file_size < kHeaderLenBytes)
    throw FormatError(path.string() + ": file too small for header length");
  unsigned char lenbuf[kHeaderLenBytes];
  in.read(reinterpret_cast<char*>(lenbuf), kHeaderLenBytes);
  const std::uint64_t header_len = read_u64_le(lenbuf);
  if (header_len > file_size - kHeaderLenBytes)
    throw FormatError(path.string() + ": header length " +
                      std::to_string(header_len) + " exceeds file size");

  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));

  ordered_json j;
  try {
    j = ordered_json::parse(header);
  } catch (const std::exception& e) {
    throw FormatError(path.string() + ": header is not valid JSON: " +
                      e.what());
  }
  if (!j.is_object())
    throw FormatError(path.string() + ": header is not a JSON object");

  const std::uint64_t payload_size = file_size - kHeaderLenBytes - header_len;

  std::vector<Entry> entries;
  for (const auto& [key, val] : j.items()) {
    if (key == "__metadata__") continue;
    Entry e;
    e.name = key;
    try {
      e.dtype = val.at("dtype").get<std::string>();
      e.shape = val.at("shape").get<std::vector<std::uint64_t>>();
      const auto off = val.at("data_offsets").get<std::vector<std::uint64_t>>();
      if (off.size() != 2) throw FormatError("data_offsets must have 2 items");
      e.begin = off[0];
      e.end = off[1];
    } catch (const FormatError&) {
      throw;
    } catch (const std::exception& ex) {
      throw FormatError(path.string() + ": entry '" + key + "': " + ex.what());
    }
    if (e.begin > e.end || e.end > payload_size)
      throw FormatError(path.string() + ": entry '" + key +
                        "' has offsets past end of file");
    entries.push_back(std::move(e));
  }

  // byte-ranges must not overlap
  {
    std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
    ranges.reserve(entries.size());
    for (const auto& e : entries) ranges.emplace_back(e.begin, e.end);
    std::sort(ranges.begin(), ranges.end());
    for (std::size_t i = 1; i < ranges.size(); ++i) {
      if (ranges[i].first < ranges[i - 1].second)
        throw FormatError(path.string() + ": overlapping tensor byte-ranges");
    }
  }

  LoadResult result;
  std::vector<char> buf;
  for (const auto& e : entries) {
    if (e.shape.size() != 2) {
      result.skipped.push_back(
          {e.name, "not 2-D (rank " + std::to_string(e.shape.size()) + ")"});
      continue;
    }
    if (e.shape[0] == 0 || e.shape[1] == 0) {
      result.skipped.push_back({e.name, "zero-sized dimension"});
      continue;
    }
    std::size_t elem_size;
    if (e.dtype == "F16") elem_size = 2;
    else if (e.dtype == "F32") elem_size = 4;
    else if (e.dtype == "F64") elem_size = 8;
    else
      throw UnsupportedDtypeError(path.string() + ": entry '" + e.name +
                                  "' has unsupported dtype " + e.dtype);
    const std::uint64_t numel = e.shape[0] * e.shape[1];
    if (e.end - e.begin != numel * elem_size)
      throw FormatError(path.string() + ": entry '" + e.name +
                        "' byte-range does not match shape");

    buf.resize(e.end - e.begin);
    in.seekg(static_cast<std::streamoff>(kHeaderLenBytes + header_len +
                                         e.begin));
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!in) throw IoError(path.string() + ": short read");

    WeightMatrix m;
    m.name = e.name;
    std::tie(m.layer, m.proj) = parse_name(e.name);
    m.rows = e.shape[0];
    m.cols = e.shape[1];
    m.values.resize(numel);
    if (e.dtype == "F64") {
      std::memcpy(m.values.data(), buf.data(), buf.size());
    } else if (e.dtype == "F32") {
      const auto* src = reinterpret_cast<const float*>(buf.data());
      for (std::uint64_t i = 0; i < numel; ++i) m.values[i] = src[i];
    } else {
      const auto* src = reinterpret_cast<const std::uint16_t*>(buf.data());
      for (std::uint64_t i = 0; i < numel; ++i)
        m.values[i] = half_to_double(src[i]);
    }
    for (double v : m.values) {
      if (!std::isfinite(v))
        throw FormatError(path.string() + ": entry '" + e.name +
                          "' contains non-finite values");
    }
    result.matrices.push_back(std::move(m));
  }
  return result;
}

void save_tensor_file(const std::vector<WeightMatrix>& matrices,
                      const std::filesystem::path& path) {
  ordered_json header = ordered_json::object();
  std::uint64_t offset = 0;
  for (const auto& m : matrices) {
    m.validate();
    if (header.contains(m.name))
      throw DomainError("duplicate tensor name '" + m.name + "'");
    const std::uint64_t nbytes = m.values.size() * sizeof(double);
    header[m.name] = {{"dtype", "F64"},
                      {"shape", {m.rows, m.cols}},
                      {"data_offsets", {offset, offset + nbytes}}};
    offset += nbytes;
  }
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  const std::uint64_t n = header_str.size();
  unsigned char lenbuf[kHeaderLenBytes];
  for (int i = 0; i < 8; ++i) lenbuf[i] = (n >> (8 * i)) & 0xffu;
  out.write(reinterpret_cast<const char*>(lenbuf), kHeaderLenBytes);
  out.write(header_str.data(), static_cast<std::streamsize>(n));
  for (const auto& m : matrices) {
    out.write(reinterpret_cast<const char*>(m.values.data()),
              static_cast<std::streamsize>(m.values.size() * sizeof(double)));
  }
  out.flush();
  if (!out) throw IoError("write failed for " + path.string());
}

WeightMatrix synth_powerlaw_matrix(std::size_t rows, std::size_t cols,
                                   double alpha, std::uint64_t seed) {
  if (rows < 2 || cols < 2)
    throw DomainError("synth_powerlaw_matrix requires rows, cols >= 2");
  if (!(alpha > 2.0))
    throw DomainError("synth_powerlaw_matrix requires alpha > 2");

  const std::size_t m = std::min(rows, cols);
  Rng rng(seed);

  // Haar-distributed orthonormal columns: thin QR of a Gaussian matrix with
  // the R-diagonal sign fix.
  const auto haar = [&rng](std::size_t nr, std::size_t nc) {
    Eigen::MatrixXd g(nr, nc);
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t r = 0; r < nr; ++r) g(r, c) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(nr, nc);
    const auto& qrm = qr.matrixQR();
    for (std::size_t c = 0; c < nc; ++c)
      if (qrm(c, c) < 0.0) q.col(c) = -q.col(c);
    return q;
  };

  const Eigen::MatrixXd u = haar(rows, m);
  const Eigen::MatrixXd v = haar(cols, m);
  Eigen::VectorXd sigma(m);
  for (std::size_t jj = 0; jj < m; ++jj)
    sigma(jj) = std::pow(static_cast<double>(jj + 1),
                         -0.5 / (alpha - 1.0));  // sigma^2 = j^(-1/(alpha-1))

  const Eigen::MatrixXd w = u * sigma.asDiagonal() * v.transpose();

  WeightMatrix out;
  out.name = "synth";
  out.rows = rows;
  out.cols = cols;
  out.values.resize(rows * cols);
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                           Eigen::RowMajor>>(out.values.data(), rows, cols) =
      w;
  return out;
}

}  // namespace acttail
