#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "axmul/mullib.hpp"
#include "axmul/net.hpp"
#include "axmul/sensitivity.hpp"

namespace axmul {

// One selectable multiplier for one layer: estimated loss change plus the
// layer's per-sample energy under that multiplier.
struct SelectCandidate {
  std::string name;
  double dloss = 0.0;
  double energy = 0.0;
  bool exact = false;
};

// Multiple-choice knapsack: pick exactly one candidate per layer, minimize
// the summed loss change, keep total energy within ratio * exact energy.
struct SelectionProblem {
  std::vector<std::vector<SelectCandidate>> layers;  // per mult-layer ordinal
  std::vector<double> exact_energy;                  // per layer
  double ratio = 1.0;                                // budget, in (0, 1]

  void validate() const;
};

struct SelectionSolution {
  std::vector<std::string> names;  // chosen candidate per mult-layer ordinal
  double objective = 0.0;          // summed estimated loss change
  double achieved_ratio = 0.0;     // chosen energy / all-exact energy
  bool optimal = true;
};

// Per-sample energy of one layer: pdp times the six shape factors
// N_O * H * W * N_I * W_K * H_K (the batch dimension cancels in the ratio).
double layer_energy(const ConvGeom& g, double pdp);

// Assemble the knapsack from the model geometry, the candidate library, and
// an impact table whose rows cover each layer's candidates.
SelectionProblem make_problem(const ModelGraph& m, const MultiplierLibrary& lib,
                              const LossImpactTable& table, double ratio);

// Exact best-first branch-and-bound with within-layer dominance pruning and
// a greedy fractional bound. Energies are compared as 64-bit integers scaled
// to 1e-9 of the total exact energy, so budget decisions are exact and
// platform-independent; the budget is the ratio times the scaled all-exact
// total, so ratio 1.0 always admits the all-exact assignment. Ties are
// broken toward lower energy, then lexicographically smaller name vector.
// Throws InfeasibleBudget when even the cheapest assignment exceeds the
// budget, carrying the minimum achievable ratio.
SelectionSolution solve(const SelectionProblem& p);

// Complete enumeration with the same tie-breaking; oracle for solve.
// Rejects instances with more than 1e6 assignments.
SelectionSolution solve_exhaustive(const SelectionProblem& p);

enum class BaselineMetric { L2Error, Mred };

const char* baseline_metric_name(BaselineMetric m);
BaselineMetric baseline_metric_from_name(const std::string& s);

// Layer-independent ablation scores in impact-table form: the L2 norm of the
// error matrix, or the multiplier's mean relative error deviation.
LossImpactTable baseline_table(const ModelGraph& m, const MultiplierLibrary& lib,
                               BaselineMetric metric);

Assignment to_assignment(const SelectionSolution& s);

void write_solution(const SelectionSolution& s, const std::string& path);
SelectionSolution read_solution(const std::string& path);

}  // namespace axmul
