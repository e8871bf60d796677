#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "axmul/mullib.hpp"
#include "axmul/net.hpp"

namespace axmul {

enum class HessianMode { Auto, Full, RankOne };

const char* hessian_mode_name(HessianMode m);
HessianMode hessian_mode_from_name(const std::string& s);

// Occurrence statistics of multiplier input code pairs over one layer's
// quantized forward pass: raw counts plus one weighted sum per seed tensor.
struct PairCounts {
  int bits = 0;  // operands are bits x bits
  std::vector<int64_t> raw;                   // length 2^(2*bits)
  std::vector<std::vector<double>> weighted;  // [seed][2^(2*bits)]

  size_t size() const { return raw.size(); }
};

// Scatter pass over one multiplicative layer of a retained quantized trace:
// every product of code pair (m, n) contributing to an output element bumps
// raw[m << bits | n], and adds each seed's value at that element to the
// seed's accumulator. Seeds are shaped like the layer output. Padded window
// positions count with the padding code, exactly as the forward multiplies
// them. Accumulation is blockwise and independent of the worker count.
PairCounts counting_pass(const ModelGraph& m, const ForwardTrace& trace, int layer_index,
                         const std::vector<const Tensor*>& seeds);

struct PowerIterationResult {
  double lambda = 0.0;
  std::vector<double> v;  // unit norm
  bool degenerate = false;  // operator was identically zero
  int iterations = 0;
};

// Dominant eigenpair of a symmetric PSD k x k matrix (row-major) by power
// iteration from a seed-deterministic start vector. Stops when the Rayleigh
// quotient moves by less than `tol` relative, or after max_iters.
PowerIterationResult power_iteration(const std::vector<double>& sym, int k, uint64_t seed,
                                     int max_iters = 100, double tol = 1e-6);

// Batch-mean curvature of softmax cross-entropy at the logits:
// (1/N) sum_s (diag(p_s) - p_s p_s^T), row-major K x K.
std::vector<double> output_hessian_ce(const Tensor& probs);

// Per-layer first/second-order model of how the loss responds to multiplier
// error entries, everything already scaled by s_X * s_W.
struct LayerSensitivity {
  int layer = 0;  // ordinal among multiplicative layers
  int bits = 0;
  double scale = 0.0;                       // s_X * s_W of the layer
  HessianMode mode = HessianMode::RankOne;  // resolved, never Auto
  std::vector<double> g;     // gradient w.r.t. flattened error entries
  std::vector<double> jac;   // K x M row-major: batch-mean logits w.r.t. error entries
  std::vector<double> hess;  // Full mode: dense row-major matrix
  std::vector<double> u;     // RankOne mode: Jacobian-projected top eigenvector
  double lambda = 0.0;       // RankOne mode: dominant curvature of the loss head
  bool degenerate = false;   // loss head had zero curvature (saturated softmax)
};

// Taylor estimate of the loss change when the layer's products pick up the
// flattened error e: g.e + 1/2 e^T H e, or g.e + 1/2 lambda (u.e)^2.
double loss_change_estimate(const LayerSensitivity& s, const std::vector<double>& e);

struct EstimationOptions {
  HessianMode mode = HessianMode::Auto;  // Auto: Full while the table fits, else RankOne
  uint64_t seed = 0;                     // power-iteration start vector
};

// One exact-path forward/backward over the batch, one extra backward per
// logit, and one counting pass per seed and layer. The outputs depend only
// on the prepared model and the batch, never on any candidate multiplier.
std::vector<LayerSensitivity> estimate_sensitivities(const ModelGraph& m, const Tensor& batch,
                                                     const std::vector<int>& labels,
                                                     const EstimationOptions& opts);

struct ImpactEntry {
  std::string mul;
  double dloss = 0.0;
};

// Estimated loss change for every candidate multiplier of every layer.
struct LossImpactTable {
  std::map<int, std::vector<ImpactEntry>> rows;  // key: mult-layer ordinal
  int batch_size = 0;
  HessianMode mode = HessianMode::Auto;  // as requested (Auto preserved)
};

// Sensitivities once, then a pure evaluation per library candidate of the
// layer's bitwidth; no re-simulation.
LossImpactTable build_table(const ModelGraph& m, const Tensor& batch,
                            const std::vector<int>& labels, const MultiplierLibrary& lib,
                            const EstimationOptions& opts);

void write_table(const LossImpactTable& t, const std::string& path);
LossImpactTable read_table(const std::string& path);

}  // namespace axmul
