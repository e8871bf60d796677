#include "axmul/select.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>

#include "axmul/errors.hpp"

namespace axmul {

double layer_energy(const ConvGeom& g, double pdp) {
  if (!(pdp > 0.0)) throw ConfigError("layer energy needs a positive pdp");
  if (g.mults_per_sample() <= 0) throw ConfigError("layer energy needs positive dimensions");
  return pdp * static_cast<double>(g.mults_per_sample());
}

void SelectionProblem::validate() const {
  if (!(ratio > 0.0) || ratio > 1.0) throw ConfigError("energy ratio must be in (0, 1]");
  if (layers.empty()) throw ConfigError("selection problem has no layers");
  if (exact_energy.size() != layers.size())
    throw ConfigError("selection problem: exact energy list does not match the layer count");
  for (size_t k = 0; k < layers.size(); ++k) {
    if (layers[k].empty())
      throw ConfigError("layer " + std::to_string(k) + " has no candidates");
    if (!(exact_energy[k] > 0.0))
      throw ConfigError("layer " + std::to_string(k) + " has a non-positive exact energy");
    bool has_exact = false;
    std::set<std::string> names;
    for (const SelectCandidate& c : layers[k]) {
      if (!(c.energy > 0.0))
        throw ConfigError("candidate " + c.name + " in layer " + std::to_string(k) +
                          " has a non-positive energy");
      if (!names.insert(c.name).second)
        throw ConfigError("duplicate candidate " + c.name + " in layer " + std::to_string(k));
      has_exact = has_exact || c.exact;
    }
    if (!has_exact)
      throw ConfigError("layer " + std::to_string(k) + " has no exact candidate");
  }
}

namespace {

// Budget arithmetic in units of 1e-9 of the total exact energy.
constexpr double kRes = 1e9;

struct ScaledCand {
  double dloss = 0.0;
  int64_t e = 0;
  int index = -1;  // into the problem's candidate list
};

struct Scaled {
  std::vector<std::vector<ScaledCand>> cands;  // raw candidate lists, scaled
  int64_t exact_total = 0;                     // scaled all-exact energy
  int64_t budget = 0;
  std::vector<int64_t> min_e;  // per layer
};

Scaled scale_problem(const SelectionProblem& p) {
  double total_exact = 0.0;
  for (double e : p.exact_energy) total_exact += e;
  auto to_int = [total_exact](double energy) {
    int64_t e = std::llround(energy / total_exact * kRes);
    return e < 1 ? int64_t{1} : e;  // energies are positive; stay visible to the budget
  };
  Scaled s;
  s.cands.resize(p.layers.size());
  s.min_e.resize(p.layers.size());
  for (size_t k = 0; k < p.layers.size(); ++k) {
    s.exact_total += to_int(p.exact_energy[k]);
    for (size_t c = 0; c < p.layers[k].size(); ++c) {
      const SelectCandidate& cand = p.layers[k][c];
      s.cands[k].push_back({cand.dloss, to_int(cand.energy), static_cast<int>(c)});
    }
    int64_t mn = s.cands[k][0].e;
    for (const ScaledCand& sc : s.cands[k]) mn = std::min(mn, sc.e);
    s.min_e[k] = mn;
  }
  // The budget is the ratio times the scaled all-exact total, not a fixed
  // constant, so ratio 1.0 always admits the all-exact assignment no matter
  // how the per-candidate rounding fell.
  s.budget = std::llround(p.ratio * static_cast<double>(s.exact_total));
  return s;
}

int64_t min_total(const Scaled& s) {
  int64_t t = 0;
  for (int64_t e : s.min_e) t += e;
  return t;
}

[[noreturn]] void throw_infeasible(const Scaled& s) {
  double min_ratio =
      static_cast<double>(min_total(s)) / static_cast<double>(s.exact_total);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9f", min_ratio);
  throw InfeasibleBudget(
      "energy budget infeasible: the cheapest assignment needs ratio " + std::string(buf),
      min_ratio);
}

struct Best {
  bool has = false;
  double obj = 0.0;
  int64_t e = 0;
  std::vector<int> pick;
  std::vector<std::string> names;
};

// Solution order: objective, then energy, then the name vector.
bool better(double obj, int64_t e, const std::vector<std::string>& names, const Best& b) {
  if (!b.has) return true;
  if (obj != b.obj) return obj < b.obj;
  if (e != b.e) return e < b.e;
  return names < b.names;
}

SelectionSolution finish(const Scaled& s, const Best& b) {
  SelectionSolution sol;
  sol.names = b.names;
  sol.objective = b.obj;
  sol.achieved_ratio = static_cast<double>(b.e) / static_cast<double>(s.exact_total);
  sol.optimal = true;
  return sol;
}

}  // namespace

SelectionSolution solve_exhaustive(const SelectionProblem& p) {
  p.validate();
  const Scaled s = scale_problem(p);
  if (min_total(s) > s.budget) throw_infeasible(s);

  double combos = 1.0;
  for (const auto& layer : p.layers) combos *= static_cast<double>(layer.size());
  if (combos > 1e6)
    throw ConfigError("exhaustive enumeration refused: more than 1e6 assignments");

  const size_t L = p.layers.size();
  Best best;
  std::vector<int> pick(L, 0);
  std::vector<std::string> names(L);

  auto rec = [&](auto&& self, size_t k, double obj, int64_t e) -> void {
    if (k == L) {
      if (e <= s.budget && better(obj, e, names, best)) {
        best.has = true;
        best.obj = obj;
        best.e = e;
        best.pick = pick;
        best.names = names;
      }
      return;
    }
    for (size_t c = 0; c < s.cands[k].size(); ++c) {
      pick[k] = static_cast<int>(c);
      names[k] = p.layers[k][c].name;
      self(self, k + 1, obj + s.cands[k][c].dloss, e + s.cands[k][c].e);
    }
  };
  rec(rec, 0, 0.0, 0);
  if (!best.has) throw_infeasible(s);
  return finish(s, best);
}

namespace {

struct HullStep {
  int layer = 0;
  int step = 0;
  double dl = 0.0;  // change in objective (negative)
  int64_t de = 0;   // extra energy (positive)
  double density = 0.0;
};

struct Search {
  // Per layer: dominance-pruned frontier, energy ascending, dloss descending.
  std::vector<std::vector<ScaledCand>> frontier;
  std::vector<std::vector<std::string>> fr_names;
  std::vector<int64_t> suffix_min_e;     // from layer k to the end
  std::vector<double> suffix_base_obj;   // cheapest-energy dloss sums
  std::vector<HullStep> steps;           // density-descending LP increments
  int64_t budget = 0;
};

Search build_search(const SelectionProblem& p, const Scaled& s) {
  const size_t L = p.layers.size();
  Search g;
  g.budget = s.budget;
  g.frontier.resize(L);
  g.fr_names.resize(L);

  for (size_t k = 0; k < L; ++k) {
    std::vector<size_t> order(s.cands[k].size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      const ScaledCand &ca = s.cands[k][a], &cb = s.cands[k][b];
      if (ca.e != cb.e) return ca.e < cb.e;
      if (ca.dloss != cb.dloss) return ca.dloss < cb.dloss;
      return p.layers[k][a].name < p.layers[k][b].name;
    });
    // Keep only candidates that strictly improve the objective as energy
    // grows; a dropped candidate is dominated by an earlier one, and the
    // sort order matches the solution tie-breaking, so the global optimum
    // never uses a dropped candidate.
    for (size_t i : order) {
      const ScaledCand& c = s.cands[k][i];
      if (!g.frontier[k].empty() && c.dloss >= g.frontier[k].back().dloss) continue;
      g.frontier[k].push_back(c);
      g.fr_names[k].push_back(p.layers[k][i].name);
    }
  }

  g.suffix_min_e.assign(L + 1, 0);
  g.suffix_base_obj.assign(L + 1, 0.0);
  for (size_t k = L; k-- > 0;) {
    g.suffix_min_e[k] = g.suffix_min_e[k + 1] + g.frontier[k][0].e;
    g.suffix_base_obj[k] = g.suffix_base_obj[k + 1] + g.frontier[k][0].dloss;
  }

  // Convex hull of each frontier in the (energy, dloss) plane; its steps are
  // the LP-relaxation upgrades, densities strictly decreasing within a layer.
  for (size_t k = 0; k < L; ++k) {
    const auto& fr = g.frontier[k];
    std::vector<size_t> hull;
    for (size_t i = 0; i < fr.size(); ++i) {
      while (hull.size() >= 2) {
        const ScaledCand &a = fr[hull[hull.size() - 2]], &b = fr[hull.back()], &c = fr[i];
        // pop b when the a->b slope is not steeper than the a->c slope
        double lhs = (b.dloss - a.dloss) * static_cast<double>(c.e - a.e);
        double rhs = (c.dloss - a.dloss) * static_cast<double>(b.e - a.e);
        if (lhs >= rhs)
          hull.pop_back();
        else
          break;
      }
      hull.push_back(i);
    }
    for (size_t t = 1; t < hull.size(); ++t) {
      const ScaledCand &a = fr[hull[t - 1]], &b = fr[hull[t]];
      HullStep st;
      st.layer = static_cast<int>(k);
      st.step = static_cast<int>(t - 1);
      st.dl = b.dloss - a.dloss;
      st.de = b.e - a.e;
      st.density = -st.dl / static_cast<double>(st.de);
      g.steps.push_back(st);
    }
  }
  std::sort(g.steps.begin(), g.steps.end(), [](const HullStep& a, const HullStep& b) {
    if (a.density != b.density) return a.density > b.density;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.step < b.step;
  });
  return g;
}

// Greedy fractional relaxation over the remaining layers: start every layer
// at its cheapest candidate, then spend the leftover budget on hull steps in
// density order, the last one fractionally. Never above the true optimum of
// the subtree.
double lp_bound(const Search& g, size_t level, int64_t fixed_e, double fixed_obj) {
  int64_t rem = g.budget - fixed_e - g.suffix_min_e[level];
  double lb = fixed_obj + g.suffix_base_obj[level];
  if (rem <= 0) return lb;
  for (const HullStep& st : g.steps) {
    if (static_cast<size_t>(st.layer) < level) continue;
    if (st.de <= rem) {
      lb += st.dl;
      rem -= st.de;
      if (rem == 0) break;
    } else {
      lb += st.dl * (static_cast<double>(rem) / static_cast<double>(st.de));
      break;
    }
  }
  return lb;
}

double prune_tol(const Best& b) { return 1e-9 * (1.0 + std::abs(b.obj)); }

}  // namespace

SelectionSolution solve(const SelectionProblem& p) {
  p.validate();
  const Scaled s = scale_problem(p);
  if (min_total(s) > s.budget) throw_infeasible(s);

  const Search g = build_search(p, s);
  const size_t L = p.layers.size();

  struct Node {
    double bound;
    size_t level;
    int64_t e;
    double obj;
    std::vector<int> pick;  // frontier indices for levels [0, level)
  };
  auto node_order = [](const Node& a, const Node& b) { return a.bound > b.bound; };
  std::priority_queue<Node, std::vector<Node>, decltype(node_order)> open(node_order);

  Best best;
  open.push({lp_bound(g, 0, 0, 0.0), 0, 0, 0.0, {}});

  std::vector<std::string> names(L);
  while (!open.empty()) {
    Node n = open.top();
    open.pop();
    if (best.has && n.bound > best.obj + prune_tol(best)) continue;

    const auto& fr = g.frontier[n.level];
    for (size_t c = 0; c < fr.size(); ++c) {
      const int64_t e2 = n.e + fr[c].e;
      if (e2 + g.suffix_min_e[n.level + 1] > g.budget) continue;
      const double obj2 = n.obj + fr[c].dloss;
      if (n.level + 1 == L) {
        for (size_t k = 0; k < L - 1; ++k) names[k] = g.fr_names[k][static_cast<size_t>(n.pick[k])];
        names[L - 1] = g.fr_names[L - 1][c];
        if (better(obj2, e2, names, best)) {
          best.has = true;
          best.obj = obj2;
          best.e = e2;
          best.names = names;
        }
        continue;
      }
      const double b = lp_bound(g, n.level + 1, e2, obj2);
      if (best.has && b > best.obj + prune_tol(best)) continue;
      Node child{b, n.level + 1, e2, obj2, n.pick};
      child.pick.push_back(static_cast<int>(c));
      open.push(std::move(child));
    }
  }
  if (!best.has) throw_infeasible(s);
  return finish(s, best);
}

SelectionProblem make_problem(const ModelGraph& m, const MultiplierLibrary& lib,
                              const LossImpactTable& table, double ratio) {
  if (!(ratio > 0.0) || ratio > 1.0) throw ConfigError("energy ratio must be in (0, 1]");
  if (!m.prepared()) throw ConfigError("selection needs a prepared model");
  lib.validate();

  const std::vector<int> mult = m.mult_layers();
  const std::vector<ConvGeom> geoms = mult_geometries(m);
  SelectionProblem p;
  p.ratio = ratio;
  p.layers.resize(mult.size());
  p.exact_energy.resize(mult.size());

  for (size_t k = 0; k < mult.size(); ++k) {
    const Layer& l = m.layers[static_cast<size_t>(mult[k])];
    auto it = table.rows.find(static_cast<int>(k));
    if (it == table.rows.end())
      throw ConfigError("impact table has no row for layer " + std::to_string(k));
    const LutMultiplier* exact = lib.exact_for(l.bits, l.bits);
    if (!exact)
      throw ConfigError("library has no exact " + std::to_string(l.bits) + "x" +
                        std::to_string(l.bits) + " multiplier for layer " + std::to_string(k));
    p.exact_energy[k] = layer_energy(geoms[k], exact->pdp);
    for (const ImpactEntry& ent : it->second) {
      const LutMultiplier* mul = lib.find(ent.mul);
      if (!mul) throw ConfigError("impact table names unknown multiplier " + ent.mul);
      if (mul->bitwidth_a != l.bits || mul->bitwidth_b != l.bits)
        throw ConfigError("multiplier " + ent.mul + " does not match layer " + std::to_string(k) +
                          " bitwidth");
      SelectCandidate c;
      c.name = ent.mul;
      c.dloss = ent.dloss;
      c.energy = layer_energy(geoms[k], mul->pdp);
      c.exact = mul->provenance == Provenance::Exact;
      p.layers[k].push_back(std::move(c));
    }
  }
  p.validate();
  return p;
}

const char* baseline_metric_name(BaselineMetric m) {
  return m == BaselineMetric::L2Error ? "l2_error" : "mred";
}

BaselineMetric baseline_metric_from_name(const std::string& s) {
  if (s == "l2_error") return BaselineMetric::L2Error;
  if (s == "mred") return BaselineMetric::Mred;
  throw ConfigError("unknown baseline metric '" + s + "' (expected l2_error or mred)");
}

LossImpactTable baseline_table(const ModelGraph& m, const MultiplierLibrary& lib,
                               BaselineMetric metric) {
  if (!m.prepared()) throw ConfigError("baseline scoring needs a prepared model");
  lib.validate();
  const std::vector<int> mult = m.mult_layers();
  LossImpactTable t;
  t.batch_size = 0;  // scores are data-free
  t.mode = HessianMode::Auto;
  for (size_t k = 0; k < mult.size(); ++k) {
    const Layer& l = m.layers[static_cast<size_t>(mult[k])];
    const auto group = lib.group(l.bits, l.bits);
    if (group.empty())
      throw ConfigError("library has no " + std::to_string(l.bits) + "x" +
                        std::to_string(l.bits) + " candidates for layer " + std::to_string(k));
    auto& row = t.rows[static_cast<int>(k)];
    for (const LutMultiplier* mul : group) {
      double score = 0.0;
      if (metric == BaselineMetric::L2Error) {
        const ErrorMatrix em = error_matrix(*mul);
        double ss = 0.0;
        for (int32_t v : em.flattened()) ss += static_cast<double>(v) * v;
        score = std::sqrt(ss);
      } else {
        score = error_metrics(*mul).mred;
      }
      row.push_back({mul->name, score});
    }
  }
  return t;
}

Assignment to_assignment(const SelectionSolution& s) {
  Assignment a;
  for (size_t k = 0; k < s.names.size(); ++k) a.mul_by_layer[static_cast<int>(k)] = s.names[k];
  return a;
}

void write_solution(const SelectionSolution& s, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write solution file: " + path);
  char buf[64];
  f << "# selected multiplier per layer\n";
  std::snprintf(buf, sizeof buf, "%.17g", s.objective);
  f << "# objective " << buf << "\n";
  std::snprintf(buf, sizeof buf, "%.17g", s.achieved_ratio);
  f << "# ratio " << buf << "\n";
  f << "# optimal " << (s.optimal ? 1 : 0) << "\n";
  for (size_t k = 0; k < s.names.size(); ++k) f << k << ' ' << s.names[k] << '\n';
  f << "end\n";
  f.flush();
  if (!f) throw DataError("failed writing solution file: " + path);
}

SelectionSolution read_solution(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open solution file: " + path);
  SelectionSolution s;
  std::map<int, std::string> rows;
  std::string line;
  int line_no = 0;
  bool saw_end = false;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream ss(line.substr(1));
      std::string key;
      ss >> key;
      if (key == "objective") {
        if (!(ss >> s.objective))
          throw DataError("bad objective at line " + std::to_string(line_no) + ": " + path);
      } else if (key == "ratio") {
        if (!(ss >> s.achieved_ratio))
          throw DataError("bad ratio at line " + std::to_string(line_no) + ": " + path);
      } else if (key == "optimal") {
        int v = 0;
        if (!(ss >> v))
          throw DataError("bad optimal flag at line " + std::to_string(line_no) + ": " + path);
        s.optimal = v != 0;
      }
      continue;
    }
    if (line == "end") {
      saw_end = true;
      break;
    }
    std::istringstream ss(line);
    int k = 0;
    std::string name;
    if (!(ss >> k >> name) || k < 0)
      throw DataError("bad solution row at line " + std::to_string(line_no) + ": " + path);
    if (!rows.emplace(k, name).second)
      throw DataError("duplicate layer " + std::to_string(k) + " in solution file: " + path);
  }
  if (!saw_end) throw DataError("truncated solution file (missing end marker): " + path);
  if (rows.empty()) throw DataError("solution file lists no layers: " + path);
  const int max_k = rows.rbegin()->first;
  if (static_cast<size_t>(max_k) + 1 != rows.size())
    throw DataError("solution file skips a layer index: " + path);
  s.names.resize(rows.size());
  for (const auto& [k, name] : rows) s.names[static_cast<size_t>(k)] = name;
  return s;
}

}  // namespace axmul
