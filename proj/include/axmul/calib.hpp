#pragma once

#include <vector>

#include "axmul/mullib.hpp"
#include "axmul/net.hpp"
#include "axmul/quant.hpp"
#include "axmul/tensor.hpp"

namespace axmul {

// Elementwise clip of the weights to [sig(gamma)*min(W), sig(beta)*max(W)],
// the bounds taken from the tensor passed in. Matches effective_weight on a
// calibrated layer bit for bit.
Tensor lwc_clip(const Tensor& w, double gamma, double beta);

struct LwcGradients {
  double d_gamma = 0.0;
  double d_beta = 0.0;
};

// Analytic gradients of the loss w.r.t. the pre-sigmoid clip bounds, given
// the loss gradient w.r.t. the clipped weights. Each element strictly
// outside the clip range contributes the derivative of its bound,
// bound * (1 - sig); interior elements contribute nothing.
LwcGradients lwc_gradients(const Tensor& w, const Tensor& w_clipped, double gamma, double beta,
                           const Tensor& d_w_clipped);

// Input-scale sweep grid: q = 0.00, 0.01, ..., 0.49.
inline constexpr int kScaleSweepSteps = 50;

struct ScaleSearch {
  double q_star = 0.0;
  double mre = 0.0;      // winning score
  QuantParams params;    // re-fit of the approximate activations at q_star
  std::vector<double> mre_by_q;  // one score per sweep candidate
};

// Clips the approximate activations at each candidate (q, 1-q) quantile pair
// (clamp only, no rounding) and scores the mean relative error against the
// reference activations, mean(|a - x| / (|x| + 1e-8)). Ties prefer the
// smaller q. The quantization parameters are re-fit at the winner.
ScaleSearch input_scale_search(const Tensor& approx, const Tensor& ref, int bits);

struct LayerCalib {
  int layer = 0;  // multiplicative-layer ordinal
  double q_star = 0.0;
  double scale = 0.0;  // input scale after the re-fit
  double gamma = 0.0;
  double beta = 0.0;
};

struct CalibOptions {
  int epochs = 5;
  double lr = 0.1;
  int batch = 64;
};

struct CalibState {
  std::vector<LayerCalib> layers;
  int epochs = 0;
  double lr = 0.0;  // final learning rate, after any divergence halvings
  int batch = 0;
  int lr_halvings = 0;
  bool diverged = false;  // the guard ran out of halvings and gave up
  std::vector<double> epoch_loss;  // mean batch loss per completed epoch
};

// Two-phase accuracy recovery on a prepared model under an assignment.
// Phase 1 re-fits each multiplicative layer's input scale in forward order
// by the quantile sweep, comparing against activations of the all-exact
// model cached up front. Phase 2 runs mini-batch gradient descent on the
// weight-clipping bounds (init sig = 0.999), re-fitting the weight
// quantization grid to [sig(gamma)*min W, sig(beta)*max W] after every
// update. If a batch loss exceeds 10x the first batch's loss, the learning
// rate is halved and the epoch restarted, at most three times. Touches only
// quantization parameters and clip state; weights, tables, and the
// assignment stay untouched. Deterministic for a fixed sample order.
CalibState calibrate(ModelGraph& m, const Assignment& a, const MultiplierLibrary* lib,
                     const Tensor& samples, const std::vector<int>& labels,
                     const CalibOptions& opts);

}  // namespace axmul
