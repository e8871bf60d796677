#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "axmul/errors.hpp"
#include "axmul/mullib.hpp"
#include "axmul/rng.hpp"
#include "doctest.h"

using namespace axmul;

namespace {

// Independent brute-force metrics: enumerate every operand pair from
// scratch, no shared code with the library implementation.
struct OracleMetrics {
  double mred = 0, med = 0, er = 0;
  int max_abs = 0;
};

OracleMetrics oracle_metrics(const LutMultiplier& m) {
  OracleMetrics o;
  int rows = 1 << m.bitwidth_a, cols = 1 << m.bitwidth_b;
  int total = rows * cols;
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      int err = m.table[static_cast<size_t>(i) * cols + j] - i * j;
      int abs_err = std::abs(err);
      o.med += abs_err;
      o.mred += static_cast<double>(abs_err) / (i * j > 0 ? i * j : 1);
      if (abs_err > 0) o.er += 1;
      o.max_abs = std::max(o.max_abs, abs_err);
    }
  o.med /= total;
  o.mred /= total;
  o.er /= total;
  return o;
}

std::filesystem::path temp_file(const char* name) {
  auto dir = std::filesystem::temp_directory_path() / "axmul_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_SUITE_BEGIN("mullib");

TEST_CASE("exact generator produces true products") {
  auto m = gen_exact(2, 2);
  CHECK(m.at(3, 3) == 9);
  CHECK(m.at(0, 3) == 0);
  CHECK(m.provenance == Provenance::Exact);
  auto e = error_matrix(m);
  for (int32_t v : e.entries) CHECK(v == 0);

  CHECK(gen_exact(4, 4).at(15, 15) == 225);
  CHECK_THROWS_AS(gen_exact(1, 4), ConfigError);
  CHECK_THROWS_AS(gen_exact(4, 9), ConfigError);
}

TEST_CASE("truncation clears low partial-product bits") {
  auto m = gen_truncated(2, 2, 1);
  CHECK(m.at(3, 3) == 8);  // 9 with bit 0 cleared
  CHECK(m.at(2, 1) == 2);  // bit 0 already clear

  auto e = error_matrix(m);
  CHECK(e.at(3, 1) == -1);
  CHECK(e.at(2, 1) == 0);
  CHECK(e.at(1, 1) == -1);

  auto zero_drop = gen_truncated(2, 2, 0);
  auto exact = gen_exact(2, 2);
  CHECK(zero_drop.table == exact.table);
  CHECK(zero_drop.provenance == Provenance::Exact);

  CHECK_THROWS_AS(gen_truncated(2, 2, 4), ConfigError);
  CHECK_THROWS_AS(gen_truncated(2, 2, -1), ConfigError);

  // Truncation never overshoots: all errors <= 0.
  auto big = gen_truncated(4, 4, 3);
  for (int32_t v : error_matrix(big).entries) CHECK(v <= 0);
}

TEST_CASE("metrics of the 2x2 single-column truncation") {
  auto met = error_metrics(gen_truncated(2, 2, 1));
  // Odd products: (1,1) (1,3) (3,1) (3,3) -> 4 of 16 pairs lose their LSB.
  CHECK(met.med == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(met.error_rate == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(met.max_abs_error == 1);
  // MRED = (1/1 + 1/3 + 1/3 + 1/9)/16 = (16/9)/16 = 1/9.
  CHECK(met.mred == doctest::Approx(1.0 / 9.0).epsilon(1e-12));

  auto exact_met = error_metrics(gen_exact(4, 4));
  CHECK(exact_met.mred == 0.0);
  CHECK(exact_met.med == 0.0);
  CHECK(exact_met.max_abs_error == 0);
  CHECK(exact_met.error_rate == 0.0);
}

TEST_CASE("metrics match the brute-force oracle on random multipliers") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    int a = rng.range(2, 5), b = rng.range(2, 5);
    LutMultiplier m;
    switch (trial % 3) {
      case 0: m = gen_truncated(a, b, rng.range(0, a + b - 1)); break;
      case 1: m = gen_perturbed(a, b, rng.next_u64(), rng.uniform(0.01, 0.2)); break;
      default: m = gen_exact(a, b); break;
    }
    auto got = error_metrics(m);
    auto want = oracle_metrics(m);
    CHECK(got.mred == doctest::Approx(want.mred).epsilon(1e-12));
    CHECK(got.med == doctest::Approx(want.med).epsilon(1e-12));
    CHECK(got.error_rate == doctest::Approx(want.er).epsilon(1e-12));
    CHECK(got.max_abs_error == want.max_abs);
  }
}

TEST_CASE("error matrix reconstructs the table and flattens row-major") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    auto m = gen_perturbed(3, 2, rng.next_u64(), 0.15);
    auto e = error_matrix(m);
    for (int i = 0; i < m.rows(); ++i)
      for (int j = 0; j < m.cols(); ++j) CHECK(e.at(i, j) + i * j == m.at(i, j));
    // e[i*2^b + j] indexing
    CHECK(e.flattened()[static_cast<size_t>(3) * 4 + 2] == e.at(3, 2));
  }
}

TEST_CASE("MED is non-decreasing in dropped columns") {
  for (int a = 2; a <= 4; ++a) {
    double prev = -1.0;
    for (int drop = 0; drop < 2 * a; ++drop) {
      double med = error_metrics(gen_truncated(a, a, drop)).med;
      CHECK(med >= prev);
      prev = med;
    }
  }
}

TEST_CASE("perturbed generator is deterministic and respects its MRED cap") {
  auto m1 = gen_perturbed(4, 4, 42, 0.2);
  auto m2 = gen_perturbed(4, 4, 42, 0.2);
  CHECK(m1.table == m2.table);
  CHECK(m1.pdp == m2.pdp);

  auto met = error_metrics(m1);
  CHECK(met.mred > 0.0);
  CHECK(met.mred <= 0.2);

  for (int32_t v : m1.table) {
    CHECK(v >= 0);
    CHECK(v <= 255);
  }

  // Different seeds give different tables (overwhelmingly likely).
  auto m3 = gen_perturbed(4, 4, 43, 0.2);
  CHECK(m1.table != m3.table);

  CHECK_THROWS_AS(gen_perturbed(4, 4, 1, 0.0), ConfigError);
  CHECK_THROWS_AS(gen_perturbed(4, 4, 1, 0.25), ConfigError);
}

TEST_CASE("tiny perturbation budget touches at most one low-magnitude entry") {
  for (uint64_t seed = 0; seed < 8; ++seed) {
    auto m = gen_perturbed(2, 2, seed, 0.01);
    auto met = error_metrics(m);
    CHECK(met.mred <= 0.01);
    int diffs = 0;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        if (m.at(i, j) != i * j) {
          ++diffs;
          CHECK(std::abs(m.at(i, j) - i * j) == 1);
        }
    CHECK(diffs <= 1);
  }
}

TEST_CASE("perturbed pdp shrinks as mred grows") {
  // Energy proxy must be positive and monotone in accuracy.
  auto low = gen_perturbed(4, 4, 5, 0.02);
  auto high = gen_perturbed(4, 4, 5, 0.2);
  CHECK(low.pdp > 0.0);
  CHECK(high.pdp > 0.0);
  CHECK(low.pdp <= pdp_exact_proxy(4, 4));
  CHECK(high.pdp < low.pdp);
}

TEST_CASE("candidate library layout") {
  auto lib = make_candidate_library({4}, 8, 99, 0.2);
  CHECK(lib.entries.size() == 9);  // exact + 8 generated
  CHECK(lib.exact_for(4, 4) != nullptr);
  int generated = 0;
  for (const auto& m : lib.entries)
    if (m.provenance == Provenance::Generated) {
      ++generated;
      CHECK(error_metrics(m).mred <= 0.2);
      CHECK(error_metrics(m).mred > 0.0);
    }
  CHECK(generated == 8);

  auto lib2 = make_candidate_library({4}, 8, 99, 0.2);
  for (size_t i = 0; i < lib.entries.size(); ++i)
    CHECK(lib.entries[i].table == lib2.entries[i].table);
}

TEST_CASE("library file round-trip is exact") {
  MultiplierLibrary lib;
  lib.entries.push_back(gen_exact(4, 4));
  lib.entries.push_back(gen_truncated(4, 4, 2));
  lib.entries.push_back(gen_perturbed(4, 4, 3, 0.17));
  lib.entries[2].pdp = 1.2345678901234567;  // exercise full double round-trip

  auto path = temp_file("roundtrip.mul");
  write_library(lib, path.string());
  auto back = read_library(path.string());

  REQUIRE(back.entries.size() == lib.entries.size());
  for (size_t i = 0; i < lib.entries.size(); ++i) {
    CHECK(back.entries[i].name == lib.entries[i].name);
    CHECK(back.entries[i].bitwidth_a == lib.entries[i].bitwidth_a);
    CHECK(back.entries[i].bitwidth_b == lib.entries[i].bitwidth_b);
    CHECK(back.entries[i].table == lib.entries[i].table);
    CHECK(back.entries[i].pdp == lib.entries[i].pdp);  // bit-exact
    CHECK(back.entries[i].provenance == lib.entries[i].provenance);
  }
}

TEST_CASE("malformed library files are rejected with location info") {
  auto write_text = [](const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p);
    out << text;
  };

  auto p = temp_file("bad_row.mul");
  write_text(p,
             "mul m 2 2 0.4 generated\n"
             "0 0 0 0\n"
             "0 1 2 3\n"
             "0 2 4 6 8 10 12 14 16 18 20 22 24 26 28 30 32\n"  // 17 entries
             "0 3 6 9\n"
             "end\n");
  CHECK_THROWS_WITH_AS(read_library(p.string()), doctest::Contains("expected 4 entries"), DataError);

  p = temp_file("out_of_range.mul");
  std::string big = "mul m 4 4 1.6 generated\n";
  for (int i = 0; i < 16; ++i) {
    for (int j = 0; j < 16; ++j) big += (i == 2 && j == 2 ? std::string("256") : std::to_string(i * j)) + " ";
    big += "\n";
  }
  big += "end\n";
  write_text(p, big);
  CHECK_THROWS_WITH_AS(read_library(p.string()), doctest::Contains("out of range"), DataError);

  p = temp_file("dup.mul");
  write_text(p,
             "mul exact2x2 2 2 0.4 exact\n0 0 0 0\n0 1 2 3\n0 2 4 6\n0 3 6 9\nend\n"
             "mul exact2x2 2 2 0.4 exact\n0 0 0 0\n0 1 2 3\n0 2 4 6\n0 3 6 9\nend\n");
  CHECK_THROWS_WITH_AS(read_library(p.string()), doctest::Contains("duplicate"), DataError);

  p = temp_file("no_end.mul");
  write_text(p, "mul m 2 2 0.4 generated\n0 0 0 0\n0 1 2 3\n0 2 4 6\n0 3 6 9\n");
  CHECK_THROWS_WITH_AS(read_library(p.string()), doctest::Contains("missing 'end'"), DataError);

  p = temp_file("no_exact.mul");
  write_text(p, "mul m 2 2 0.4 generated\n0 0 0 0\n0 1 2 3\n0 2 4 6\n0 3 6 9\nend\n");
  CHECK_THROWS_WITH_AS(read_library(p.string()), doctest::Contains("exactly one exact"), DataError);
}

TEST_SUITE_END();
