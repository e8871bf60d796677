#include "axmul/sensitivity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "axmul/errors.hpp"
#include "axmul/parallel.hpp"
#include "axmul/rng.hpp"

namespace axmul {

const char* hessian_mode_name(HessianMode m) {
  switch (m) {
    case HessianMode::Auto: return "auto";
    case HessianMode::Full: return "full";
    case HessianMode::RankOne: return "rank_one";
  }
  return "auto";
}

HessianMode hessian_mode_from_name(const std::string& s) {
  if (s == "auto") return HessianMode::Auto;
  if (s == "full") return HessianMode::Full;
  if (s == "rank_one" || s == "rank1") return HessianMode::RankOne;
  throw ConfigError("unknown hessian mode '" + s + "' (expected auto, full or rank_one)");
}

namespace {

// Dense curvature tables are M x M for M = 2^(2*bits); past this M only the
// rank-one form is allowed.
constexpr size_t kMaxFullDim = 4096;

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(const std::vector<double>& v) { return std::sqrt(dot(v, v)); }

}  // namespace

PairCounts counting_pass(const ModelGraph& m, const ForwardTrace& trace, int layer_index,
                         const std::vector<const Tensor*>& seeds) {
  if (layer_index < 0 || layer_index >= static_cast<int>(m.layers.size()))
    throw ConfigError("counting pass: layer index out of range");
  const Layer& l = m.layers[static_cast<size_t>(layer_index)];
  if (!l.multiplicative()) throw ConfigError("counting pass: layer is not multiplicative");
  if (trace.layers.size() != m.layers.size())
    throw ConfigError("counting pass: trace does not match the model");
  const LayerTrace& lt = trace.layers[static_cast<size_t>(layer_index)];
  if (lt.x_codes.data.empty() || lt.w_codes.data.empty())
    throw ConfigError("counting pass: trace holds no quantized codes for the layer");
  for (const Tensor* seed : seeds)
    if (!seed || seed->shape != lt.y.shape)
      throw ConfigError("counting pass: seed tensor does not match the layer output shape");

  const int bits = l.bits;
  const size_t cols = size_t{1} << bits;
  const size_t M = size_t{1} << (2 * bits);
  const int n = lt.x_codes.dim(0);
  const ConvGeom g = conv_geometry(l, lt.x_codes.dim(1), lt.x_codes.dim(2), lt.x_codes.dim(3));
  const size_t in_plane = static_cast<size_t>(g.in_h) * g.in_w;
  const size_t in_sz = static_cast<size_t>(g.n_in) * in_plane;
  const size_t out_plane = static_cast<size_t>(g.out_h) * g.out_w;
  const size_t out_sz = static_cast<size_t>(g.n_out) * out_plane;
  const size_t kvol = static_cast<size_t>(g.n_in) * g.kh * g.kw;
  const size_t n_seeds = seeds.size();

  // Per-block accumulators merged in block order keep the sums independent
  // of the worker count.
  const int nb = block_count(n);
  std::vector<std::vector<int64_t>> raw_blocks(static_cast<size_t>(nb));
  std::vector<std::vector<double>> wtd_blocks(static_cast<size_t>(nb));
  parallel_blocks(n, [&](int b, int begin, int end) {
    raw_blocks[static_cast<size_t>(b)].assign(M, 0);
    wtd_blocks[static_cast<size_t>(b)].assign(M * n_seeds, 0.0);
    int64_t* raw = raw_blocks[static_cast<size_t>(b)].data();
    double* wtd = wtd_blocks[static_cast<size_t>(b)].data();
    std::vector<double> sv(n_seeds);
    for (int s = begin; s < end; ++s) {
      const int32_t* xc = lt.x_codes.data.data() + static_cast<size_t>(s) * in_sz;
      for (int o = 0; o < g.n_out; ++o) {
        const int32_t* wc_o = lt.w_codes.data.data() + static_cast<size_t>(o) * kvol;
        for (int oy = 0; oy < g.out_h; ++oy)
          for (int ox = 0; ox < g.out_w; ++ox) {
            const size_t oi = static_cast<size_t>(s) * out_sz + static_cast<size_t>(o) * out_plane +
                              static_cast<size_t>(oy) * g.out_w + ox;
            for (size_t t = 0; t < n_seeds; ++t) sv[t] = seeds[t]->data[oi];
            size_t ki = 0;
            for (int c = 0; c < g.n_in; ++c)
              for (int ky = 0; ky < g.kh; ++ky)
                for (int kx = 0; kx < g.kw; ++kx, ++ki) {
                  int iy = oy * g.stride + ky - g.pad;
                  int ix = ox * g.stride + kx - g.pad;
                  bool in = iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w;
                  int32_t code_x =
                      in ? xc[c * in_plane + static_cast<size_t>(iy) * g.in_w + ix] : lt.pad_code;
                  const size_t idx = static_cast<size_t>(code_x) * cols + wc_o[ki];
                  ++raw[idx];
                  for (size_t t = 0; t < n_seeds; ++t) wtd[t * M + idx] += sv[t];
                }
          }
      }
    }
  });

  PairCounts pc;
  pc.bits = bits;
  pc.raw.assign(M, 0);
  pc.weighted.assign(n_seeds, std::vector<double>(M, 0.0));
  for (int b = 0; b < nb; ++b) {
    const int64_t* raw = raw_blocks[static_cast<size_t>(b)].data();
    const double* wtd = wtd_blocks[static_cast<size_t>(b)].data();
    for (size_t q = 0; q < M; ++q) pc.raw[q] += raw[q];
    for (size_t t = 0; t < n_seeds; ++t)
      for (size_t q = 0; q < M; ++q) pc.weighted[t][q] += wtd[t * M + q];
  }
  return pc;
}

std::vector<double> output_hessian_ce(const Tensor& probs) {
  if (probs.shape.size() != 2 || probs.dim(0) < 1 || probs.dim(1) < 1)
    throw ConfigError("output hessian expects probabilities shaped [batch, classes]");
  const int n = probs.dim(0), k = probs.dim(1);
  std::vector<double> h(static_cast<size_t>(k) * k, 0.0);
  for (int s = 0; s < n; ++s) {
    const double* p = probs.data.data() + static_cast<size_t>(s) * k;
    for (int i = 0; i < k; ++i) {
      h[static_cast<size_t>(i) * k + i] += p[i];
      for (int j = 0; j < k; ++j) h[static_cast<size_t>(i) * k + j] -= p[i] * p[j];
    }
  }
  const double inv = 1.0 / n;
  for (double& v : h) v *= inv;
  return h;
}

PowerIterationResult power_iteration(const std::vector<double>& sym, int k, uint64_t seed,
                                     int max_iters, double tol) {
  if (k <= 0) throw ConfigError("power iteration: dimension must be positive");
  if (sym.size() != static_cast<size_t>(k) * k)
    throw ConfigError("power iteration: matrix size does not match the dimension");

  PowerIterationResult r;
  Rng rng(seed);
  r.v.resize(static_cast<size_t>(k));
  auto reseed = [&] {
    for (double& x : r.v) x = rng.normal();
    double nv = norm(r.v);
    if (nv == 0.0) {
      std::fill(r.v.begin(), r.v.end(), 0.0);
      r.v[0] = 1.0;
    } else {
      for (double& x : r.v) x /= nv;
    }
  };
  reseed();

  double amax = 0.0;
  for (double v : sym) amax = std::max(amax, std::abs(v));
  if (amax == 0.0) {
    r.degenerate = true;
    return r;
  }

  std::vector<double> w(static_cast<size_t>(k));
  double lam_prev = 0.0;
  bool have_prev = false;
  for (int t = 1; t <= max_iters; ++t) {
    for (int i = 0; i < k; ++i) {
      double s = 0.0;
      const double* row = sym.data() + static_cast<size_t>(i) * k;
      for (int j = 0; j < k; ++j) s += row[j] * r.v[static_cast<size_t>(j)];
      w[static_cast<size_t>(i)] = s;
    }
    const double lam = dot(r.v, w);
    r.iterations = t;
    if (have_prev && std::abs(lam - lam_prev) / std::max(std::abs(lam_prev), 1e-12) < tol) {
      r.lambda = lam;  // Rayleigh quotient of the returned v: a lower bound on lambda_max
      return r;
    }
    lam_prev = lam;
    have_prev = true;
    const double nw = norm(w);
    if (nw == 0.0) {
      reseed();  // start vector fell in the kernel; deterministic restart
      have_prev = false;
    } else {
      for (int i = 0; i < k; ++i) r.v[static_cast<size_t>(i)] = w[static_cast<size_t>(i)] / nw;
    }
  }
  for (int i = 0; i < k; ++i) {
    double s = 0.0;
    const double* row = sym.data() + static_cast<size_t>(i) * k;
    for (int j = 0; j < k; ++j) s += row[j] * r.v[static_cast<size_t>(j)];
    w[static_cast<size_t>(i)] = s;
  }
  r.lambda = dot(r.v, w);
  return r;
}

double loss_change_estimate(const LayerSensitivity& s, const std::vector<double>& e) {
  const size_t M = s.g.size();
  if (e.size() != M)
    throw ConfigError("error vector length does not match the layer's bitwidth");
  double lin = 0.0;
  for (size_t q = 0; q < M; ++q) lin += s.g[q] * e[q];
  if (s.mode == HessianMode::Full) {
    double quad = 0.0;
    for (size_t p = 0; p < M; ++p) {
      const double ep = e[p];
      if (ep == 0.0) continue;
      const double* hp = s.hess.data() + p * M;
      double row = 0.0;
      for (size_t q = 0; q < M; ++q) row += hp[q] * e[q];
      quad += ep * row;
    }
    return lin + 0.5 * quad;
  }
  const double t = dot(s.u, e);
  return lin + 0.5 * s.lambda * t * t;
}

std::vector<LayerSensitivity> estimate_sensitivities(const ModelGraph& m, const Tensor& batch,
                                                     const std::vector<int>& labels,
                                                     const EstimationOptions& opts) {
  m.validate();
  if (!m.prepared())
    throw ConfigError("sensitivity estimation needs a prepared (quantized) model");
  if (batch.shape.size() != 4) throw ConfigError("sensitivity estimation expects a [N,C,H,W] batch");
  const int n = batch.dim(0);
  if (static_cast<int>(labels.size()) != n)
    throw ConfigError("label count does not match the batch");
  const int K = m.n_classes;

  const std::vector<int> mult = m.mult_layers();
  const Assignment exact = Assignment::all_exact(m);
  ForwardOptions fo;
  fo.assignment = &exact;
  fo.retain_trace = true;
  const ForwardTrace tr = forward(m, batch, fo);
  const LossResult lr = loss_ce(tr.logits, labels);

  std::vector<LayerSensitivity> out(mult.size());

  // Loss-gradient seed: occurrences weighted by dL/dy give dL/de directly,
  // up to the layer's s_X*s_W factor (the forward adds s_X*s_W*e per product).
  {
    const Tensor dlog = loss_ce_backward(lr.probs, labels);
    const BackwardResult br = backward(m, tr, dlog, fo, false);
    for (size_t k = 0; k < mult.size(); ++k) {
      const int li = mult[k];
      const Layer& l = m.layers[static_cast<size_t>(li)];
      PairCounts pc = counting_pass(m, tr, li, {&br.d_y[static_cast<size_t>(li)]});
      LayerSensitivity& s = out[k];
      s.layer = static_cast<int>(k);
      s.bits = l.bits;
      s.scale = l.qx.s * l.qw.s;
      s.g = std::move(pc.weighted[0]);
      for (double& v : s.g) v *= s.scale;
    }
  }

  // One backward per logit, seeded with the batch-mean weight 1/N, turns the
  // same counting pass into rows of the Jacobian of the mean logits w.r.t.
  // the error entries.
  for (size_t k = 0; k < mult.size(); ++k)
    out[k].jac.assign(static_cast<size_t>(K) << (2 * out[k].bits), 0.0);
  for (int i = 0; i < K; ++i) {
    Tensor dlog({n, K});
    const double inv = 1.0 / n;
    for (int s = 0; s < n; ++s) dlog.data[static_cast<size_t>(s) * K + i] = inv;
    const BackwardResult br = backward(m, tr, dlog, fo, false);
    for (size_t k = 0; k < mult.size(); ++k) {
      const int li = mult[k];
      PairCounts pc = counting_pass(m, tr, li, {&br.d_y[static_cast<size_t>(li)]});
      const size_t M = pc.size();
      double* row = out[k].jac.data() + static_cast<size_t>(i) * M;
      for (size_t q = 0; q < M; ++q) row[q] = out[k].scale * pc.weighted[0][q];
    }
  }

  const std::vector<double> h_out = output_hessian_ce(lr.probs);
  PowerIterationResult eig;
  bool eig_ready = false;

  for (size_t k = 0; k < mult.size(); ++k) {
    LayerSensitivity& s = out[k];
    const size_t M = size_t{1} << (2 * s.bits);
    HessianMode mode = opts.mode;
    if (mode == HessianMode::Auto)
      mode = M <= kMaxFullDim ? HessianMode::Full : HessianMode::RankOne;
    else if (mode == HessianMode::Full && M > kMaxFullDim)
      throw ConfigError("full curvature for " + std::to_string(s.bits) + "-bit products needs a " +
                        std::to_string(M) + "x" + std::to_string(M) +
                        " table; use mode auto or rank_one");
    s.mode = mode;

    if (mode == HessianMode::Full) {
      // hess = J^T H J via T = H J.
      std::vector<double> tmp(static_cast<size_t>(K) * M, 0.0);
      for (int i = 0; i < K; ++i)
        for (int j = 0; j < K; ++j) {
          const double hij = h_out[static_cast<size_t>(i) * K + j];
          if (hij == 0.0) continue;
          const double* jr = s.jac.data() + static_cast<size_t>(j) * M;
          double* tr_row = tmp.data() + static_cast<size_t>(i) * M;
          for (size_t q = 0; q < M; ++q) tr_row[q] += hij * jr[q];
        }
      s.hess.assign(M * M, 0.0);
      for (int i = 0; i < K; ++i) {
        const double* jr = s.jac.data() + static_cast<size_t>(i) * M;
        const double* tr_row = tmp.data() + static_cast<size_t>(i) * M;
        for (size_t p = 0; p < M; ++p) {
          const double jp = jr[p];
          if (jp == 0.0) continue;
          double* hp = s.hess.data() + p * M;
          for (size_t q = 0; q < M; ++q) hp[q] += jp * tr_row[q];
        }
      }
    } else {
      if (!eig_ready) {
        eig = power_iteration(h_out, K, opts.seed);
        eig_ready = true;
      }
      s.lambda = eig.lambda;
      s.degenerate = eig.degenerate;
      s.u.assign(M, 0.0);
      for (int i = 0; i < K; ++i) {
        const double vi = eig.v[static_cast<size_t>(i)];
        if (vi == 0.0) continue;
        const double* jr = s.jac.data() + static_cast<size_t>(i) * M;
        for (size_t q = 0; q < M; ++q) s.u[q] += vi * jr[q];
      }
    }
  }
  return out;
}

LossImpactTable build_table(const ModelGraph& m, const Tensor& batch,
                            const std::vector<int>& labels, const MultiplierLibrary& lib,
                            const EstimationOptions& opts) {
  lib.validate();
  const std::vector<LayerSensitivity> sens = estimate_sensitivities(m, batch, labels, opts);
  const std::vector<int> mult = m.mult_layers();

  LossImpactTable t;
  t.batch_size = batch.dim(0);
  t.mode = opts.mode;

  struct Job {
    const LayerSensitivity* s;
    const LutMultiplier* mul;
    ImpactEntry* slot;
  };
  std::vector<Job> jobs;
  for (size_t k = 0; k < mult.size(); ++k) {
    const Layer& l = m.layers[static_cast<size_t>(mult[k])];
    const auto group = lib.group(l.bits, l.bits);
    if (group.empty())
      throw ConfigError("library has no " + std::to_string(l.bits) + "x" +
                        std::to_string(l.bits) + " candidates for layer " + std::to_string(k));
    auto& row = t.rows[static_cast<int>(k)];
    row.resize(group.size());
    for (size_t c = 0; c < group.size(); ++c) jobs.push_back({&sens[k], group[c], &row[c]});
  }

  // Each estimate is a pure function of the sensitivities; slots are disjoint.
  parallel_blocks(static_cast<int>(jobs.size()), [&](int, int begin, int end) {
    for (int j = begin; j < end; ++j) {
      const Job& job = jobs[static_cast<size_t>(j)];
      job.slot->mul = job.mul->name;
      job.slot->dloss = loss_change_estimate(*job.s, error_matrix(*job.mul).flattened_double());
    }
  });
  return t;
}

void write_table(const LossImpactTable& t, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write table file: " + path);
  f << "# estimated loss change per layer and candidate multiplier\n";
  f << "# batch " << t.batch_size << "\n";
  f << "# curvature " << hessian_mode_name(t.mode) << "\n";
  f << "# columns: layer multiplier dloss\n";
  char buf[64];
  for (const auto& [k, row] : t.rows)
    for (const ImpactEntry& ent : row) {
      std::snprintf(buf, sizeof buf, "%.17g", ent.dloss);
      f << k << ' ' << ent.mul << ' ' << buf << '\n';
    }
  f << "end\n";
  f.flush();
  if (!f) throw DataError("failed writing table file: " + path);
}

LossImpactTable read_table(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open table file: " + path);
  LossImpactTable t;
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
      if (key == "batch") {
        if (!(ss >> t.batch_size))
          throw DataError("bad batch metadata at line " + std::to_string(line_no) + ": " + path);
      } else if (key == "curvature") {
        std::string mode;
        ss >> mode;
        try {
          t.mode = hessian_mode_from_name(mode);
        } catch (const ConfigError&) {
          throw DataError("bad curvature metadata at line " + std::to_string(line_no) + ": " + path);
        }
      }
      continue;
    }
    if (line == "end") {
      saw_end = true;
      break;
    }
    std::istringstream ss(line);
    int k = 0;
    ImpactEntry ent;
    if (!(ss >> k >> ent.mul >> ent.dloss))
      throw DataError("bad table row at line " + std::to_string(line_no) + ": " + path);
    t.rows[k].push_back(std::move(ent));
  }
  if (!saw_end) throw DataError("truncated table file (missing end marker): " + path);
  return t;
}

}  // namespace axmul
