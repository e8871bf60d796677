#include "axmul/mullib.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "axmul/errors.hpp"
#include "axmul/rng.hpp"

namespace axmul {

namespace {

void check_bitwidths(int a, int b) {
  if (a < 2 || a > 8 || b < 2 || b > 8)
    throw ConfigError("multiplier bitwidths must be in [2, 8], got " + std::to_string(a) + "x" +
                      std::to_string(b));
}

std::string format_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::Exact: return "exact";
    case Provenance::Generated: return "generated";
    case Provenance::Imported: return "imported";
  }
  return "generated";
}

Provenance provenance_from_name(const std::string& s) {
  if (s == "exact") return Provenance::Exact;
  if (s == "generated") return Provenance::Generated;
  if (s == "imported") return Provenance::Imported;
  throw DataError("unknown provenance '" + s + "'");
}

std::vector<double> ErrorMatrix::flattened_double() const {
  return std::vector<double>(entries.begin(), entries.end());
}

const LutMultiplier* MultiplierLibrary::find(const std::string& name) const {
  for (const auto& m : entries)
    if (m.name == name) return &m;
  return nullptr;
}

const LutMultiplier* MultiplierLibrary::exact_for(int a, int b) const {
  for (const auto& m : entries)
    if (m.provenance == Provenance::Exact && m.bitwidth_a == a && m.bitwidth_b == b) return &m;
  return nullptr;
}

std::vector<const LutMultiplier*> MultiplierLibrary::group(int a, int b) const {
  std::vector<const LutMultiplier*> out;
  for (const auto& m : entries)
    if (m.bitwidth_a == a && m.bitwidth_b == b) out.push_back(&m);
  return out;
}

void MultiplierLibrary::validate() const {
  std::set<std::string> names;
  std::map<std::pair<int, int>, int> exact_count;
  for (const auto& m : entries) {
    check_bitwidths(m.bitwidth_a, m.bitwidth_b);
    if (!names.insert(m.name).second) throw DataError("duplicate multiplier name '" + m.name + "'");
    if (m.pdp <= 0.0) throw DataError("multiplier '" + m.name + "': pdp must be > 0");
    size_t want = static_cast<size_t>(m.rows()) * static_cast<size_t>(m.cols());
    if (m.table.size() != want)
      throw DataError("multiplier '" + m.name + "': table has " + std::to_string(m.table.size()) +
                      " entries, expected " + std::to_string(want));
    for (int i = 0; i < m.rows(); ++i)
      for (int j = 0; j < m.cols(); ++j) {
        int32_t v = m.at(i, j);
        if (v < 0 || v > m.max_entry_value())
          throw DataError("multiplier '" + m.name + "': entry [" + std::to_string(i) + "][" +
                          std::to_string(j) + "] = " + std::to_string(v) + " out of range [0, " +
                          std::to_string(m.max_entry_value()) + "]");
        if (m.provenance == Provenance::Exact && v != i * j)
          throw DataError("multiplier '" + m.name + "' is marked exact but entry [" +
                          std::to_string(i) + "][" + std::to_string(j) + "] != i*j");
      }
    exact_count[{m.bitwidth_a, m.bitwidth_b}] += m.provenance == Provenance::Exact ? 1 : 0;
  }
  for (const auto& [bits, n] : exact_count) {
    if (n != 1)
      throw DataError("library group " + std::to_string(bits.first) + "x" +
                      std::to_string(bits.second) + " must contain exactly one exact multiplier, has " +
                      std::to_string(n));
  }
}

double pdp_exact_proxy(int a, int b) { return 0.1 * a * b; }

LutMultiplier gen_exact(int a, int b) {
  check_bitwidths(a, b);
  LutMultiplier m;
  m.name = "exact" + std::to_string(a) + "x" + std::to_string(b);
  m.bitwidth_a = a;
  m.bitwidth_b = b;
  m.pdp = pdp_exact_proxy(a, b);
  m.provenance = Provenance::Exact;
  m.table.resize(static_cast<size_t>(1) << (a + b));
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) m.table[static_cast<size_t>(i) * m.cols() + j] = i * j;
  return m;
}

LutMultiplier gen_truncated(int a, int b, int drop_columns) {
  check_bitwidths(a, b);
  if (drop_columns < 0 || drop_columns >= a + b)
    throw ConfigError("drop_columns must be in [0, " + std::to_string(a + b - 1) + "], got " +
                      std::to_string(drop_columns));
  LutMultiplier m = gen_exact(a, b);
  m.name = "trunc" + std::to_string(a) + "x" + std::to_string(b) + "d" + std::to_string(drop_columns);
  m.provenance = drop_columns == 0 ? Provenance::Exact : Provenance::Generated;
  int32_t mask = ~((1 << drop_columns) - 1);
  for (auto& v : m.table) v &= mask;
  double drop_fraction = static_cast<double>(drop_columns) / (a + b);
  m.pdp = pdp_exact_proxy(a, b) * (1.0 - 0.5 * drop_fraction);
  return m;
}

LutMultiplier gen_perturbed(int a, int b, uint64_t seed, double target_mred) {
  check_bitwidths(a, b);
  if (!(target_mred > 0.0) || target_mred > 0.2)
    throw ConfigError("target_mred must be in (0, 0.2], got " + std::to_string(target_mred));

  LutMultiplier m = gen_exact(a, b);
  {
    char name[64];
    std::snprintf(name, sizeof(name), "pert%dx%d_s%llu_m%03d", a, b,
                  static_cast<unsigned long long>(seed), static_cast<int>(std::lround(target_mred * 1000)));
    m.name = name;
  }
  m.provenance = Provenance::Generated;

  const int rows = m.rows(), cols = m.cols();
  const int64_t n_pairs = static_cast<int64_t>(rows) * cols;
  const int32_t max_val = m.max_entry_value();

  // Error shape follows real truncation/compressor designs: products with a
  // zero operand stay exact (an AND array yields them for free), and each
  // perturbed entry keeps |delta| <= 2*target relative to its exact product,
  // so error magnitude scales with operand magnitude. The budget bounds the
  // table MRED: sum over entries of |delta|/(i*j) <= target_mred * n_pairs.
  Rng rng(seed);
  double remaining = target_mred * static_cast<double>(n_pairs);
  std::vector<uint8_t> touched(static_cast<size_t>(n_pairs), 0);
  const int64_t attempts = 4 * n_pairs;
  for (int64_t t = 0; t < attempts && remaining > 0.0; ++t) {
    int i = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(rows - 1)));
    int j = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(cols - 1)));
    size_t idx = static_cast<size_t>(i) * cols + j;
    bool negative = rng.below(2) == 1;
    if (touched[idx]) continue;
    const double denom = i * j;
    const double rel_cap = std::min(remaining, 2.0 * target_mred);
    int64_t budget_cap = static_cast<int64_t>(std::floor(rel_cap * denom + 1e-9));
    // A one-LSB error is always in character for a simplified array; allow it
    // whenever the budget can absorb its relative cost.
    if (budget_cap < 1 && 1.0 / denom <= remaining) budget_cap = 1;
    int32_t exact = i * j;
    int64_t range_cap = negative ? exact : max_val - exact;
    int64_t cap = std::min(budget_cap, range_cap);
    if (cap < 1) continue;
    int64_t mag = 1 + static_cast<int64_t>(rng.below(static_cast<uint64_t>(cap)));
    m.table[idx] = exact + static_cast<int32_t>(negative ? -mag : mag);
    touched[idx] = 1;
    remaining -= static_cast<double>(mag) / denom;
  }

  double mred = error_metrics(m).mred;
  // Saturating energy proxy: real simplified-array designs reach large
  // savings at small MRED, with diminishing returns after. The quarter-power
  // maps mred 0.2 -> 50% off and mred ~0.006 -> ~21% off, monotone in error.
  m.pdp = pdp_exact_proxy(a, b) * (1.0 - 0.5 * std::pow(std::min(1.0, mred / 0.2), 0.25));
  return m;
}

ErrorMatrix error_matrix(const LutMultiplier& m) {
  ErrorMatrix e;
  e.bitwidth_a = m.bitwidth_a;
  e.bitwidth_b = m.bitwidth_b;
  e.entries.resize(m.table.size());
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) {
      size_t idx = static_cast<size_t>(i) * m.cols() + j;
      e.entries[idx] = m.table[idx] - i * j;
    }
  return e;
}

MulErrorMetrics error_metrics(const LutMultiplier& m) {
  MulErrorMetrics out;
  ErrorMatrix e = error_matrix(m);
  int64_t n = 0, nonzero = 0;
  double sum_rel = 0.0, sum_abs = 0.0;
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) {
      int32_t err = e.at(i, j);
      int32_t abs_err = err < 0 ? -err : err;
      sum_rel += static_cast<double>(abs_err) / std::max(i * j, 1);
      sum_abs += abs_err;
      out.max_abs_error = std::max(out.max_abs_error, abs_err);
      nonzero += abs_err != 0 ? 1 : 0;
      ++n;
    }
  out.mred = sum_rel / static_cast<double>(n);
  out.med = sum_abs / static_cast<double>(n);
  out.error_rate = static_cast<double>(nonzero) / static_cast<double>(n);
  return out;
}

MultiplierLibrary make_candidate_library(const std::vector<int>& bitwidths, int count,
                                         uint64_t seed, double mred_cap) {
  if (count < 1) throw ConfigError("candidate count must be >= 1");
  if (!(mred_cap > 0.0) || mred_cap > 0.2)
    throw ConfigError("mred_cap must be in (0, 0.2]");
  std::vector<int> widths = bitwidths;
  std::sort(widths.begin(), widths.end());
  widths.erase(std::unique(widths.begin(), widths.end()), widths.end());
  if (widths.empty()) throw ConfigError("at least one bitwidth required");

  MultiplierLibrary lib;
  for (int bits : widths) {
    check_bitwidths(bits, bits);
    lib.entries.push_back(gen_exact(bits, bits));
    for (int i = 0; i < count; ++i) {
      // Spread MRED targets over (0, cap] so candidates trade accuracy for
      // energy at distinct operating points. Take the ratio first so the
      // final step lands exactly on the cap instead of an ulp above it.
      double target = std::min(mred_cap, mred_cap * (static_cast<double>(i + 1) / count));
      uint64_t sub_seed = seed ^ (0x9e3779b97f4a7c15ULL * static_cast<uint64_t>(i + 1) +
                                  static_cast<uint64_t>(bits) * 131ULL);
      LutMultiplier m = gen_perturbed(bits, bits, sub_seed, target);
      char name[32];
      std::snprintf(name, sizeof(name), "pert%dx%d_%02d", bits, bits, i);
      m.name = name;
      lib.entries.push_back(std::move(m));
    }
  }
  lib.validate();
  return lib;
}

void write_library(const MultiplierLibrary& lib, const std::string& path) {
  lib.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "# approximate multiplier library\n";
  out << "# pdp values are analytic proxies unless provenance is 'imported'\n";
  for (const auto& m : lib.entries) {
    MulErrorMetrics met = error_metrics(m);
    out << "mul " << m.name << " " << m.bitwidth_a << " " << m.bitwidth_b << " "
        << format_g17(m.pdp) << " " << provenance_name(m.provenance) << "\n";
    char metrics[160];
    std::snprintf(metrics, sizeof(metrics), "# metrics mred=%.6g med=%.6g max_abs=%d error_rate=%.6g\n",
                  met.mred, met.med, met.max_abs_error, met.error_rate);
    out << metrics;
    for (int i = 0; i < m.rows(); ++i) {
      for (int j = 0; j < m.cols(); ++j) {
        if (j) out << ' ';
        out << m.at(i, j);
      }
      out << '\n';
    }
    out << "end\n";
  }
  if (!out) throw DataError("write failed for '" + path + "'");
}

MultiplierLibrary read_library(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open multiplier library '" + path + "'");

  MultiplierLibrary lib;
  std::string line;
  int line_no = 0;

  auto fail = [&](const std::string& msg) {
    throw DataError(path + ":" + std::to_string(line_no) + ": " + msg);
  };

  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string tok;
    if (!(ls >> tok) || tok[0] == '#') continue;
    if (tok != "mul") fail("expected 'mul' entry header, got '" + tok + "'");

    LutMultiplier m;
    std::string prov;
    if (!(ls >> m.name >> m.bitwidth_a >> m.bitwidth_b >> m.pdp >> prov))
      fail("malformed 'mul' header (want: mul <name> <a> <b> <pdp> <provenance>)");
    if (m.bitwidth_a < 2 || m.bitwidth_a > 8 || m.bitwidth_b < 2 || m.bitwidth_b > 8)
      fail("multiplier '" + m.name + "': bitwidths out of [2, 8]");
    m.provenance = provenance_from_name(prov);
    if (m.pdp <= 0.0) fail("multiplier '" + m.name + "': pdp must be > 0");

    int rows = m.rows(), cols = m.cols();
    m.table.reserve(static_cast<size_t>(rows) * cols);
    int got_rows = 0;
    bool closed = false;
    while (std::getline(in, line)) {
      ++line_no;
      std::istringstream rs(line);
      std::string first;
      if (!(rs >> first) || first[0] == '#') continue;
      if (first == "end") {
        closed = true;
        break;
      }
      if (got_rows == rows) fail("multiplier '" + m.name + "': too many table rows (expected " +
                                 std::to_string(rows) + ")");
      rs.clear();
      rs.str(line);
      int64_t v;
      int got_cols = 0;
      while (rs >> v) {
        if (got_cols == cols)
          fail("multiplier '" + m.name + "' row " + std::to_string(got_rows) + ": expected " +
               std::to_string(cols) + " entries per row");
        if (v < 0 || v > m.max_entry_value())
          fail("multiplier '" + m.name + "': entry " + std::to_string(v) + " out of range [0, " +
               std::to_string(m.max_entry_value()) + "]");
        m.table.push_back(static_cast<int32_t>(v));
        ++got_cols;
      }
      if (!rs.eof()) fail("multiplier '" + m.name + "': non-numeric table entry");
      if (got_cols != cols)
        fail("multiplier '" + m.name + "' row " + std::to_string(got_rows) + ": got " +
             std::to_string(got_cols) + " entries, expected " + std::to_string(cols));
      ++got_rows;
    }
    if (!closed) fail("multiplier '" + m.name + "': missing 'end'");
    if (got_rows != rows)
      fail("multiplier '" + m.name + "': got " + std::to_string(got_rows) + " rows, expected " +
           std::to_string(rows));
    if (lib.find(m.name)) fail("duplicate multiplier name '" + m.name + "'");
    lib.entries.push_back(std::move(m));
  }
  lib.validate();
  return lib;
}

}  // namespace axmul
