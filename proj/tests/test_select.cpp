#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "axmul/errors.hpp"
#include "axmul/mullib.hpp"
#include "axmul/net.hpp"
#include "axmul/rng.hpp"
#include "axmul/select.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace axmul;

namespace {

std::string temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "axmul_tests";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

SelectCandidate cand(std::string name, double dloss, double energy, bool exact = false) {
  SelectCandidate c;
  c.name = std::move(name);
  c.dloss = dloss;
  c.energy = energy;
  c.exact = exact;
  return c;
}

// The two-layer instance solved by hand: budget 15 of 20 admits exactly one
// of the layers to stay exact, and the second layer's approximation is the
// cheaper perturbation.
SelectionProblem worked_example() {
  SelectionProblem p;
  p.layers = {
      {cand("exact4x4", 0.0, 10.0, true), cand("trim_a", 0.5, 5.0)},
      {cand("exact4x4", 0.0, 10.0, true), cand("trim_b", 0.1, 5.0)},
  };
  p.exact_energy = {10.0, 10.0};
  p.ratio = 0.75;
  return p;
}

double pick_energy(Rng& rng) {
  static const double grid[] = {1.0, 2.0, 2.5, 5.0, 10.0};
  if (rng.below(2) == 0) return grid[rng.below(5)];
  return rng.uniform(0.5, 10.0);
}

double pick_dloss(Rng& rng) {
  // duplicates and negatives on purpose: ties and improving candidates both
  // have to round-trip the solver's ordering
  static const double grid[] = {-0.5, 0.0, 0.1, 0.1, 0.25, 0.5};
  if (rng.below(2) == 0) return grid[rng.below(6)];
  return rng.uniform(-0.2, 1.0);
}

SelectionProblem random_problem(Rng& rng) {
  SelectionProblem p;
  const int n_layers = rng.range(1, 4);
  p.layers.resize(static_cast<size_t>(n_layers));
  p.exact_energy.resize(static_cast<size_t>(n_layers));
  for (int k = 0; k < n_layers; ++k) {
    const int n = rng.range(1, 6);
    const int exact_at = rng.range(0, n - 1);
    const double exact_energy = pick_energy(rng);
    std::set<std::string> used;
    for (int i = 0; i < n; ++i) {
      std::string name;
      do {
        name = {static_cast<char>('a' + rng.below(26)), static_cast<char>('a' + rng.below(26))};
      } while (!used.insert(name).second);
      if (i == exact_at)
        p.layers[static_cast<size_t>(k)].push_back(cand(name, 0.0, exact_energy, true));
      else
        p.layers[static_cast<size_t>(k)].push_back(cand(name, pick_dloss(rng), pick_energy(rng)));
    }
    p.exact_energy[static_cast<size_t>(k)] = exact_energy;
  }
  const uint64_t r = rng.below(10);
  if (r == 0)
    p.ratio = 1.0;
  else if (r == 1)
    p.ratio = rng.uniform(0.01, 0.3);  // frequently infeasible
  else
    p.ratio = rng.uniform(0.3, 1.0);
  return p;
}

// Budget arithmetic recomputed from scratch, mirroring the documented
// contract: integer energies at 1e-9 of the total exact energy, budget
// relative to the scaled all-exact total.
struct ScaledOracle {
  std::vector<std::vector<int64_t>> e;
  int64_t exact_total = 0;
  int64_t budget = 0;
};

ScaledOracle rescale(const SelectionProblem& p) {
  double total = 0.0;
  for (double v : p.exact_energy) total += v;
  auto to_int = [total](double energy) {
    int64_t v = std::llround(energy / total * 1e9);
    return v < 1 ? int64_t{1} : v;
  };
  ScaledOracle s;
  s.e.resize(p.layers.size());
  for (size_t k = 0; k < p.layers.size(); ++k) {
    s.exact_total += to_int(p.exact_energy[k]);
    for (const SelectCandidate& c : p.layers[k]) s.e[k].push_back(to_int(c.energy));
  }
  s.budget = std::llround(p.ratio * static_cast<double>(s.exact_total));
  return s;
}

}  // namespace

TEST_SUITE("select") {

TEST_CASE("layer energy is pdp times the multiplication count") {
  ConvGeom g;
  g.n_out = 2;
  g.out_h = 2;
  g.out_w = 2;
  g.n_in = 3;
  g.kh = 3;
  g.kw = 3;
  CHECK(g.mults_per_sample() == 216);
  CHECK(layer_energy(g, 1.5) == 324.0);
  CHECK(layer_energy(g, 0.75) == 162.0);  // halving pdp halves energy

  CHECK_THROWS_AS(layer_energy(g, 0.0), ConfigError);
  CHECK_THROWS_AS(layer_energy(g, -1.0), ConfigError);
  ConvGeom bad = g;
  bad.n_out = 0;
  CHECK_THROWS_AS(layer_energy(bad, 1.5), ConfigError);
}

TEST_CASE("worked two-layer instance") {
  const SelectionProblem p = worked_example();
  for (const SelectionSolution& s : {solve(p), solve_exhaustive(p)}) {
    REQUIRE(s.names.size() == 2);
    CHECK(s.names[0] == "exact4x4");
    CHECK(s.names[1] == "trim_b");
    CHECK(s.objective == 0.1);
    CHECK(s.achieved_ratio == 0.75);
    CHECK(s.optimal);
  }
}

TEST_CASE("ratio 1.0 keeps every layer exact when approximations cost loss") {
  // Six equal layers: the scaled per-layer energies each round half a unit
  // up, so a fixed-constant budget would misreport the all-exact assignment
  // as over budget. The budget must follow the scaled total instead.
  SelectionProblem p;
  for (int k = 0; k < 6; ++k) {
    p.layers.push_back({cand("ex", 0.0, 1.0, true), cand("ap", 0.3, 0.5)});
    p.exact_energy.push_back(1.0);
  }
  p.ratio = 1.0;
  for (const SelectionSolution& s : {solve(p), solve_exhaustive(p)}) {
    CHECK(s.objective == 0.0);
    CHECK(s.achieved_ratio == 1.0);
    for (const std::string& n : s.names) CHECK(n == "ex");
  }
}

TEST_CASE("negative loss changes are taken even under a loose budget") {
  SelectionProblem p;
  p.layers = {{cand("ex", 0.0, 10.0, true), cand("better", -0.25, 8.0)}};
  p.exact_energy = {10.0};
  p.ratio = 1.0;
  const SelectionSolution s = solve(p);
  CHECK(s.names == std::vector<std::string>{"better"});
  CHECK(s.objective == -0.25);
}

TEST_CASE("infeasible budgets report the minimum achievable ratio") {
  SelectionProblem p;
  p.layers = {
      {cand("ex", 0.0, 10.0, true)},
      {cand("ex", 0.0, 10.0, true), cand("ap", 0.2, 5.0)},
  };
  p.exact_energy = {10.0, 10.0};
  p.ratio = 0.6;

  double reported = 0.0;
  try {
    solve(p);
    FAIL("expected InfeasibleBudget");
  } catch (const InfeasibleBudget& e) {
    reported = e.min_achievable_ratio;
    CHECK(std::string(e.what()).find("0.75") != std::string::npos);
  }
  CHECK(reported == 0.75);
  CHECK_THROWS_AS(solve_exhaustive(p), InfeasibleBudget);

  // retrying at exactly the reported ratio succeeds
  p.ratio = reported;
  const SelectionSolution s = solve(p);
  CHECK(s.names == std::vector<std::string>{"ex", "ap"});
  CHECK(s.objective == 0.2);
  CHECK(s.achieved_ratio == 0.75);
}

TEST_CASE("ties break toward lower energy, then name order") {
  SelectionProblem p;
  p.exact_energy = {10.0};
  p.ratio = 0.8;  // the exact candidate itself is over budget

  SUBCASE("equal objective prefers the cheaper candidate") {
    p.layers = {{cand("ex", 0.0, 10.0, true), cand("aa", 0.5, 6.0), cand("bb", 0.5, 4.0)}};
    for (const SelectionSolution& s : {solve(p), solve_exhaustive(p)})
      CHECK(s.names == std::vector<std::string>{"bb"});
  }
  SUBCASE("equal objective and energy prefers the smaller name") {
    p.layers = {{cand("ex", 0.0, 10.0, true), cand("zz", 0.5, 5.0), cand("mm", 0.5, 5.0)}};
    for (const SelectionSolution& s : {solve(p), solve_exhaustive(p)})
      CHECK(s.names == std::vector<std::string>{"mm"});
  }
  SUBCASE("objective dominates energy in the ordering") {
    p.layers = {{cand("ex", 0.0, 10.0, true), cand("aa", 0.4, 7.9), cand("bb", 0.5, 2.0)}};
    for (const SelectionSolution& s : {solve(p), solve_exhaustive(p)})
      CHECK(s.names == std::vector<std::string>{"aa"});
  }
}

TEST_CASE("branch-and-bound matches exhaustive enumeration" * doctest::timeout(60)) {
  Rng rng(20260818);
  int solved = 0, infeasible = 0;
  for (int t = 0; t < 1000; ++t) {
    const SelectionProblem p = random_problem(rng);
    SelectionSolution a, b;
    bool a_inf = false, b_inf = false;
    double a_min = 0.0, b_min = 0.0;
    try {
      a = solve(p);
    } catch (const InfeasibleBudget& e) {
      a_inf = true;
      a_min = e.min_achievable_ratio;
    }
    try {
      b = solve_exhaustive(p);
    } catch (const InfeasibleBudget& e) {
      b_inf = true;
      b_min = e.min_achievable_ratio;
    }
    REQUIRE(a_inf == b_inf);
    if (a_inf) {
      REQUIRE(a_min == b_min);
      ++infeasible;
      continue;
    }
    REQUIRE(a.objective == b.objective);
    REQUIRE(a.names == b.names);
    REQUIRE(a.achieved_ratio == b.achieved_ratio);
    ++solved;
  }
  // the generator must exercise both outcomes
  CHECK(solved >= 500);
  CHECK(infeasible >= 20);
}

TEST_CASE("solutions respect the budget in the integer domain") {
  Rng rng(7);
  for (int t = 0; t < 200; ++t) {
    const SelectionProblem p = random_problem(rng);
    SelectionSolution s;
    try {
      s = solve(p);
    } catch (const InfeasibleBudget&) {
      continue;
    }
    const ScaledOracle o = rescale(p);
    int64_t chosen = 0;
    for (size_t k = 0; k < p.layers.size(); ++k) {
      size_t idx = p.layers[k].size();
      for (size_t i = 0; i < p.layers[k].size(); ++i)
        if (p.layers[k][i].name == s.names[k]) idx = i;
      REQUIRE(idx < p.layers[k].size());
      chosen += o.e[k][idx];
    }
    CHECK(chosen <= o.budget);
    CHECK(s.achieved_ratio ==
          static_cast<double>(chosen) / static_cast<double>(o.exact_total));
    CHECK(s.achieved_ratio <= p.ratio + 1e-9);
  }
}

TEST_CASE("relaxing the budget never increases the objective") {
  Rng rng(99);
  for (int t = 0; t < 150; ++t) {
    SelectionProblem p = random_problem(rng);
    double prev = 0.0;
    bool have_prev = false;
    for (double r : {0.4, 0.55, 0.7, 0.85, 1.0}) {
      p.ratio = r;
      double obj = 0.0;
      try {
        obj = solve(p).objective;
      } catch (const InfeasibleBudget&) {
        have_prev = false;  // tighter budgets may be infeasible; skip them
        continue;
      }
      if (have_prev) CHECK(obj <= prev + 1e-12);
      prev = obj;
      have_prev = true;
    }
  }
}

TEST_CASE("exhaustive enumeration refuses oversized instances") {
  SelectionProblem p;
  for (int k = 0; k < 8; ++k) {  // 6^8 assignments
    std::vector<SelectCandidate> layer{cand("ex", 0.0, 10.0, true)};
    for (int i = 1; i < 6; ++i)
      layer.push_back(cand("a" + std::to_string(i), 0.1 * i, 10.0 - i));
    p.layers.push_back(std::move(layer));
    p.exact_energy.push_back(10.0);
  }
  p.ratio = 0.8;
  CHECK_THROWS_AS(solve_exhaustive(p), ConfigError);
  const SelectionSolution s = solve(p);  // the real solver handles it
  CHECK(s.names.size() == 8);
  CHECK(s.achieved_ratio <= 0.8);
}

TEST_CASE("problem validation rejects malformed instances") {
  SelectionProblem p = worked_example();
  SUBCASE("bad ratio") {
    p.ratio = 0.0;
    CHECK_THROWS_AS(p.validate(), ConfigError);
    p.ratio = 1.5;
    CHECK_THROWS_AS(p.validate(), ConfigError);
  }
  SUBCASE("no layers") {
    p.layers.clear();
    p.exact_energy.clear();
    CHECK_THROWS_AS(p.validate(), ConfigError);
  }
  SUBCASE("empty candidate list") {
    p.layers[1].clear();
    CHECK_THROWS_AS(p.validate(), ConfigError);
  }
  SUBCASE("exact energy size mismatch") {
    p.exact_energy.pop_back();
    CHECK_THROWS_AS(p.validate(), ConfigError);
  }
  SUBCASE("non-positive candidate energy") {
    p.layers[0][1].energy = 0.0;
    CHECK_THROWS_AS(p.validate(), ConfigError);
  }
  SUBCASE("non-positive exact energy") {
    p.exact_energy[0] = -1.0;
    CHECK_THROWS_AS(p.validate(), ConfigError);
  }
  SUBCASE("duplicate names within a layer") {
    p.layers[0][1].name = "exact4x4";
    CHECK_THROWS_AS(p.validate(), ConfigError);
  }
  SUBCASE("missing exact candidate") {
    p.layers[1][0].exact = false;
    CHECK_THROWS_AS(p.validate(), ConfigError);
  }
  SUBCASE("the worked example itself is valid") { p.validate(); }
}

TEST_CASE("baseline tables score multipliers without data") {
  // model with two 2-bit conv layers
  ModelGraph m;
  m.in_ch = 1;
  m.in_h = 4;
  m.in_w = 4;
  m.n_classes = 4;
  m.layers.push_back(make_conv(1, 2, 3, 1, 1));
  m.layers.push_back(make_conv(2, 1, 3, 1, 1));
  m.layers.push_back(make_flatten());
  m.layers.push_back(make_linear(16, 4));
  Rng rng(1);
  testutil::init_random(m, rng);
  Tensor batch = testutil::random_tensor({2, 1, 4, 4}, rng);
  testutil::prepare_for_test(m, batch, 2);

  // dent: exact 2x2 table except entries (1,1) -> -1 error and (2,3) -> +2
  LutMultiplier dent = gen_exact(2, 2);
  dent.name = "dent2x2";
  dent.provenance = Provenance::Generated;
  dent.pdp = 0.5;
  dent.table[1 * 4 + 1] = 0;  // 1*1 - 1
  dent.table[2 * 4 + 3] = 8;  // 2*3 + 2
  MultiplierLibrary lib;
  lib.entries.push_back(gen_exact(2, 2));
  lib.entries.push_back(dent);
  lib.validate();

  const LossImpactTable l2 = baseline_table(m, lib, BaselineMetric::L2Error);
  REQUIRE(l2.rows.size() == 3);  // one row per multiplicative layer
  for (const auto& [k, row] : l2.rows) {
    REQUIRE(row.size() == 2);
    for (const ImpactEntry& e : row) {
      if (e.mul == "dent2x2")
        CHECK(e.dloss == doctest::Approx(std::sqrt(5.0)).epsilon(1e-15));
      else
        CHECK(e.dloss == 0.0);
    }
  }

  const LossImpactTable mred = baseline_table(m, lib, BaselineMetric::Mred);
  const double want = error_metrics(dent).mred;
  CHECK(want > 0.0);
  for (const auto& [k, row] : mred.rows)
    for (const ImpactEntry& e : row)
      CHECK(e.dloss == (e.mul == "dent2x2" ? want : 0.0));

  CHECK(std::string(baseline_metric_name(BaselineMetric::L2Error)) == "l2_error");
  CHECK(std::string(baseline_metric_name(BaselineMetric::Mred)) == "mred");
  CHECK(baseline_metric_from_name("l2_error") == BaselineMetric::L2Error);
  CHECK(baseline_metric_from_name("mred") == BaselineMetric::Mred);
  CHECK_THROWS_AS(baseline_metric_from_name("linf"), ConfigError);

  ModelGraph unprepared = m;
  for (auto& l : unprepared.layers) l.prepared = false;
  CHECK_THROWS_AS(baseline_table(unprepared, lib, BaselineMetric::Mred), ConfigError);
}

TEST_CASE("problems assemble from model, library, and impact table") {
  ModelGraph m;
  m.in_ch = 1;
  m.in_h = 6;
  m.in_w = 6;
  m.n_classes = 3;
  m.layers.push_back(make_conv(1, 2, 3, 1, 1));
  m.layers.push_back(make_relu());
  m.layers.push_back(make_flatten());
  m.layers.push_back(make_linear(72, 3));
  Rng rng(5);
  testutil::init_random(m, rng);
  Tensor batch = testutil::random_tensor({2, 1, 6, 6}, rng);
  testutil::prepare_for_test(m, batch, 3);

  MultiplierLibrary lib = make_candidate_library({3}, 2, 11, 0.2);
  lib.validate();
  REQUIRE(lib.group(3, 3).size() == 3);

  LossImpactTable table;
  table.batch_size = 2;
  for (int k = 0; k < 2; ++k)
    for (const LutMultiplier* mul : lib.group(3, 3))
      table.rows[k].push_back({mul->name, mul->provenance == Provenance::Exact ? 0.0 : 0.1});

  const SelectionProblem p = make_problem(m, lib, table, 0.8);
  REQUIRE(p.layers.size() == 2);
  CHECK(p.ratio == 0.8);
  const std::vector<ConvGeom> geoms = mult_geometries(m);
  const LutMultiplier* exact = lib.exact_for(3, 3);
  for (size_t k = 0; k < 2; ++k) {
    CHECK(p.exact_energy[k] == layer_energy(geoms[k], exact->pdp));
    REQUIRE(p.layers[k].size() == 3);
    int n_exact = 0;
    for (const SelectCandidate& c : p.layers[k]) {
      const LutMultiplier* mul = lib.find(c.name);
      REQUIRE(mul != nullptr);
      CHECK(c.energy == layer_energy(geoms[k], mul->pdp));
      n_exact += c.exact ? 1 : 0;
    }
    CHECK(n_exact == 1);
  }
  // the assembled problem solves end to end
  const SelectionSolution s = solve(p);
  CHECK(s.names.size() == 2);

  SUBCASE("missing table row") {
    LossImpactTable partial = table;
    partial.rows.erase(1);
    CHECK_THROWS_AS(make_problem(m, lib, partial, 0.8), ConfigError);
  }
  SUBCASE("unknown multiplier name") {
    LossImpactTable bad = table;
    bad.rows[0][0].mul = "ghost";
    CHECK_THROWS_AS(make_problem(m, lib, bad, 0.8), ConfigError);
  }
  SUBCASE("bitwidth mismatch") {
    MultiplierLibrary wide = make_candidate_library({3, 4}, 2, 11, 0.2);
    LossImpactTable bad = table;
    bad.rows[0][0].mul = wide.group(4, 4)[0]->name;
    CHECK_THROWS_AS(make_problem(m, wide, bad, 0.8), ConfigError);
  }
  SUBCASE("unprepared model") {
    ModelGraph raw = m;
    for (auto& l : raw.layers) l.prepared = false;
    CHECK_THROWS_AS(make_problem(raw, lib, table, 0.8), ConfigError);
  }
  SUBCASE("bad ratio") {
    CHECK_THROWS_AS(make_problem(m, lib, table, 0.0), ConfigError);
    CHECK_THROWS_AS(make_problem(m, lib, table, 1.0001), ConfigError);
  }
}

TEST_CASE("solutions convert to assignments") {
  SelectionSolution s;
  s.names = {"exact3x3", "pert3x3_01"};
  const Assignment a = to_assignment(s);
  REQUIRE(a.mul_by_layer.size() == 2);
  CHECK(a.mul_by_layer.at(0) == "exact3x3");
  CHECK(a.mul_by_layer.at(1) == "pert3x3_01");
}

TEST_CASE("solution files round-trip exactly") {
  SelectionSolution s;
  s.names = {"exact4x4", "pert4x4_03"};
  s.objective = 0.12345678901234567;
  s.achieved_ratio = 0.75;
  s.optimal = true;

  const std::string path = temp_file("solution.txt");
  write_solution(s, path);
  const SelectionSolution r = read_solution(path);
  CHECK(r.names == s.names);
  CHECK(r.objective == s.objective);
  CHECK(r.achieved_ratio == s.achieved_ratio);
  CHECK(r.optimal == s.optimal);

  // rewriting the parsed solution reproduces the file byte for byte
  const std::string path2 = temp_file("solution2.txt");
  write_solution(r, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
}

TEST_CASE("solution file errors carry context") {
  const std::string path = temp_file("solution_bad.txt");

  SUBCASE("missing file") {
    CHECK_THROWS_AS(read_solution(temp_file("no_such_solution.txt")), DataError);
  }
  SUBCASE("truncation") {
    std::ofstream(path) << "# objective 0.5\n0 exact4x4\n";  // no end marker
    CHECK_THROWS_AS(read_solution(path), DataError);
  }
  SUBCASE("bad row") {
    std::ofstream(path) << "zero exact4x4\nend\n";
    CHECK_THROWS_AS(read_solution(path), DataError);
  }
  SUBCASE("duplicate layer") {
    std::ofstream(path) << "0 a\n0 b\nend\n";
    CHECK_THROWS_AS(read_solution(path), DataError);
  }
  SUBCASE("skipped layer index") {
    std::ofstream(path) << "0 a\n2 b\nend\n";
    CHECK_THROWS_AS(read_solution(path), DataError);
  }
  SUBCASE("no layers") {
    std::ofstream(path) << "# objective 0\nend\n";
    CHECK_THROWS_AS(read_solution(path), DataError);
  }
}

}  // TEST_SUITE
