#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "axmul/net.hpp"
#include "axmul/quant.hpp"
#include "axmul/rng.hpp"

namespace testutil {

using axmul::ModelGraph;
using axmul::Rng;
using axmul::Tensor;

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.normal() * scale;
  return t;
}

inline void init_random(ModelGraph& m, Rng& rng, double weight_scale = 0.0) {
  for (auto& l : m.layers) {
    if (!l.multiplicative()) continue;
    double fan_in = static_cast<double>(l.weight.data.size()) / l.out_ch;
    double scale = weight_scale > 0.0 ? weight_scale : std::sqrt(2.0 / fan_in);
    for (double& v : l.weight.data) v = rng.normal() * scale;
    for (double& v : l.bias.data) v = rng.normal() * 0.05;
  }
}

inline std::vector<int> random_labels(int n, int k, Rng& rng) {
  std::vector<int> out(static_cast<size_t>(n));
  for (int& v : out) v = static_cast<int>(rng.below(static_cast<uint64_t>(k)));
  return out;
}

// Fit per-layer quantization parameters from one float-path run, the same
// scheme the pipeline uses: full-range fit on the observed layer inputs and
// on the weights.
inline void prepare_for_test(ModelGraph& m, const Tensor& batch, int bits) {
  axmul::ForwardOptions fo;
  fo.retain_trace = true;
  axmul::ForwardTrace tr = axmul::forward(m, batch, fo);
  for (int li : m.mult_layers()) {
    axmul::Layer& l = m.layers[static_cast<size_t>(li)];
    const Tensor& x = axmul::input_of(tr, li);
    l.qx = axmul::fit_params(std::span<const double>(x.data), bits, 0.0);
    Tensor w = axmul::effective_weight(l);
    l.qw = axmul::fit_params(std::span<const double>(w.data), bits, 0.0);
    l.bits = bits;
    l.prepared = true;
  }
}

}  // namespace testutil
