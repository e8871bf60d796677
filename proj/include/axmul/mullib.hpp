#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace axmul {

enum class Provenance : uint8_t { Exact, Generated, Imported };

const char* provenance_name(Provenance p);
Provenance provenance_from_name(const std::string& s);

// Lookup-table multiplier over unsigned operand codes. Row index is the
// first operand (activation code), column index the second (weight code);
// signedness lives entirely in the affine quantization offsets, so the
// table never sees negative operands.
struct LutMultiplier {
  std::string name;
  int bitwidth_a = 0;
  int bitwidth_b = 0;
  std::vector<int32_t> table;  // 2^a x 2^b, row-major
  double pdp = 0.0;            // picojoules per multiplication
  Provenance provenance = Provenance::Generated;

  int rows() const { return 1 << bitwidth_a; }
  int cols() const { return 1 << bitwidth_b; }
  int32_t at(int i, int j) const { return table[static_cast<size_t>(i) * cols() + j]; }
  int32_t max_entry_value() const { return (1 << (bitwidth_a + bitwidth_b)) - 1; }
};

// Signed deviation from the exact product, E[i][j] = table[i][j] - i*j.
// The row-major buffer doubles as the flattened form e[i*2^b + j].
struct ErrorMatrix {
  int bitwidth_a = 0;
  int bitwidth_b = 0;
  std::vector<int32_t> entries;

  int rows() const { return 1 << bitwidth_a; }
  int cols() const { return 1 << bitwidth_b; }
  int32_t at(int i, int j) const { return entries[static_cast<size_t>(i) * cols() + j]; }
  const std::vector<int32_t>& flattened() const { return entries; }
  std::vector<double> flattened_double() const;
};

struct MulErrorMetrics {
  double mred = 0.0;       // mean of |E|/max(i*j, 1) over all input pairs
  double med = 0.0;        // mean absolute error
  int32_t max_abs_error = 0;
  double error_rate = 0.0; // fraction of input pairs with nonzero error
};

// Flat list of multipliers; (bitwidth_a, bitwidth_b) partitions it into
// groups and each group must contain exactly one exact entry.
struct MultiplierLibrary {
  std::vector<LutMultiplier> entries;

  const LutMultiplier* find(const std::string& name) const;
  const LutMultiplier* exact_for(int bitwidth_a, int bitwidth_b) const;
  std::vector<const LutMultiplier*> group(int bitwidth_a, int bitwidth_b) const;
  // Throws DataError when a structural invariant is broken.
  void validate() const;
};

// Energy proxy for an exact axb multiplier, picojoules per multiplication.
// Placeholder for synthesis numbers; library files label it as a proxy.
double pdp_exact_proxy(int bitwidth_a, int bitwidth_b);

LutMultiplier gen_exact(int bitwidth_a, int bitwidth_b);

// Exact product with the drop_columns least-significant bits cleared.
LutMultiplier gen_truncated(int bitwidth_a, int bitwidth_b, int drop_columns);

// Seed-deterministic random perturbation of the exact table, self-limited
// so the resulting MRED stays <= target_mred.
LutMultiplier gen_perturbed(int bitwidth_a, int bitwidth_b, uint64_t seed, double target_mred);

ErrorMatrix error_matrix(const LutMultiplier& mul);
MulErrorMetrics error_metrics(const LutMultiplier& mul);

// Candidate library: per requested bitwidth, the exact entry plus `count`
// perturbed candidates with MRED targets spread over (0, mred_cap].
MultiplierLibrary make_candidate_library(const std::vector<int>& bitwidths, int count,
                                         uint64_t seed, double mred_cap);

MultiplierLibrary read_library(const std::string& path);
void write_library(const MultiplierLibrary& lib, const std::string& path);

}  // namespace axmul
