#include "axmul/calib.hpp"

#include <algorithm>
#include <cmath>
#include <span>

#include "axmul/errors.hpp"
#include "axmul/parallel.hpp"

namespace axmul {

namespace {

struct ClipBounds {
  double lo = 0.0, hi = 0.0;
  double sg = 0.0, sb = 0.0;
};

// Mirror of effective_weight's bound derivation, including the degenerate
// ordering rule, so the two stay bit-identical.
ClipBounds clip_bounds(const Tensor& w, double gamma, double beta) {
  ClipBounds b;
  b.sg = sigmoid(gamma);
  b.sb = sigmoid(beta);
  const double mn = *std::min_element(w.data.begin(), w.data.end());
  const double mx = *std::max_element(w.data.begin(), w.data.end());
  b.lo = b.sg * mn;
  b.hi = b.sb * mx;
  if (b.hi < b.lo) b.hi = b.lo;
  return b;
}

}  // namespace

Tensor lwc_clip(const Tensor& w, double gamma, double beta) {
  if (w.data.empty()) throw ConfigError("weight clip on an empty tensor");
  const ClipBounds b = clip_bounds(w, gamma, beta);
  Tensor out = w;
  for (double& v : out.data) v = std::clamp(v, b.lo, b.hi);
  return out;
}

LwcGradients lwc_gradients(const Tensor& w, const Tensor& w_clipped, double gamma, double beta,
                           const Tensor& d_w_clipped) {
  if (w.data.empty()) throw ConfigError("weight clip gradients on an empty tensor");
  if (!w.same_shape(w_clipped) || !w.same_shape(d_w_clipped))
    throw ConfigError("weight clip gradients: tensor shapes differ");
  const ClipBounds b = clip_bounds(w, gamma, beta);
  LwcGradients g;
  for (size_t i = 0; i < w.data.size(); ++i) {
    const double v = w.data[i];
    const double want = std::clamp(v, b.lo, b.hi);
    if (w_clipped.data[i] != want)
      throw ConfigError("weight clip gradients: clipped tensor does not match the bounds");
    if (v < b.lo)
      g.d_gamma += d_w_clipped.data[i] * b.lo * (1.0 - b.sg);
    else if (v > b.hi)
      g.d_beta += d_w_clipped.data[i] * b.hi * (1.0 - b.sb);
  }
  return g;
}

ScaleSearch input_scale_search(const Tensor& approx, const Tensor& ref, int bits) {
  if (approx.data.empty()) throw ConfigError("input scale search on an empty sample set");
  if (!approx.same_shape(ref))
    throw ConfigError("input scale search: approximate and reference activations differ in shape");

  std::vector<double> sorted = approx.data;
  std::sort(sorted.begin(), sorted.end());

  ScaleSearch out;
  out.mre_by_q.assign(kScaleSweepSteps, 0.0);
  const size_t n = approx.data.size();
  parallel_blocks(kScaleSweepSteps, [&](int, int begin, int end) {
    for (int i = begin; i < end; ++i) {
      const double q = 0.01 * i;
      const double lo = quantile_sorted(sorted, q);
      const double hi = quantile_sorted(sorted, 1.0 - q);
      double acc = 0.0;
      for (size_t j = 0; j < n; ++j) {
        const double a = std::clamp(approx.data[j], lo, hi);
        acc += std::abs(a - ref.data[j]) / (std::abs(ref.data[j]) + 1e-8);
      }
      out.mre_by_q[static_cast<size_t>(i)] = acc / static_cast<double>(n);
    }
  });

  int best = 0;
  for (int i = 1; i < kScaleSweepSteps; ++i)
    if (out.mre_by_q[static_cast<size_t>(i)] < out.mre_by_q[static_cast<size_t>(best)]) best = i;
  out.q_star = 0.01 * best;
  out.mre = out.mre_by_q[static_cast<size_t>(best)];
  out.params = fit_params(std::span<const double>(approx.data), bits, out.q_star);
  return out;
}

namespace {

Tensor slice_batch(const Tensor& t, int s0, int n) {
  std::vector<int> shape = t.shape;
  shape[0] = n;
  const size_t per = t.data.size() / static_cast<size_t>(t.shape[0]);
  Tensor out(std::move(shape));
  std::copy_n(t.data.begin() + static_cast<size_t>(s0) * per, static_cast<size_t>(n) * per,
              out.data.begin());
  return out;
}

// Real-domain inputs of the requested layers over the whole sample set,
// forwarded in fixed chunks to bound trace memory.
std::vector<Tensor> collect_inputs(const ModelGraph& m, const Tensor& samples,
                                   const ForwardOptions& base, const std::vector<int>& layers) {
  const int n = samples.shape[0];
  std::vector<Tensor> out(layers.size());
  constexpr int kChunk = 256;
  for (int s0 = 0; s0 < n; s0 += kChunk) {
    const int nc = std::min(kChunk, n - s0);
    const Tensor xb = slice_batch(samples, s0, nc);
    ForwardOptions fo = base;
    fo.retain_trace = true;
    const ForwardTrace tr = forward(m, xb, fo);
    for (size_t i = 0; i < layers.size(); ++i) {
      const Tensor& xin = input_of(tr, layers[i]);
      if (out[i].shape.empty()) {
        std::vector<int> shape = xin.shape;
        shape[0] = n;
        out[i] = Tensor(std::move(shape));
        out[i].data.clear();
      }
      out[i].data.insert(out[i].data.end(), xin.data.begin(), xin.data.end());
    }
  }
  return out;
}

// Weight grid from the clipped range, per the LWC update contract.
void requantize(Layer& l) {
  const ClipBounds b = clip_bounds(l.weight, l.clip_gamma, l.clip_beta);
  l.qw = make_params(b.lo, b.hi, l.bits);
}

struct LwcSnapshot {
  std::vector<double> gamma, beta;
  std::vector<QuantParams> qw;
};

LwcSnapshot snapshot(const ModelGraph& m, const std::vector<int>& mult) {
  LwcSnapshot s;
  for (int li : mult) {
    const Layer& l = m.layers[static_cast<size_t>(li)];
    s.gamma.push_back(l.clip_gamma);
    s.beta.push_back(l.clip_beta);
    s.qw.push_back(l.qw);
  }
  return s;
}

void restore(ModelGraph& m, const std::vector<int>& mult, const LwcSnapshot& s) {
  for (size_t k = 0; k < mult.size(); ++k) {
    Layer& l = m.layers[static_cast<size_t>(mult[k])];
    l.clip_gamma = s.gamma[k];
    l.clip_beta = s.beta[k];
    l.qw = s.qw[k];
  }
}

}  // namespace

CalibState calibrate(ModelGraph& m, const Assignment& a, const MultiplierLibrary* lib,
                     const Tensor& samples, const std::vector<int>& labels,
                     const CalibOptions& opts) {
  if (samples.shape.empty() || samples.shape[0] == 0 || samples.data.empty())
    throw ConfigError("calibration needs a non-empty sample set");
  if (static_cast<size_t>(samples.shape[0]) != labels.size())
    throw ConfigError("calibration labels do not match the sample count");
  if (!m.prepared()) throw ConfigError("calibration needs a prepared model");
  if (opts.epochs < 0) throw ConfigError("calibration epochs must be >= 0");
  if (opts.batch < 1) throw ConfigError("calibration batch size must be >= 1");
  if (!(opts.lr > 0.0)) throw ConfigError("calibration learning rate must be > 0");
  resolve_assignment(m, lib, a);  // surface bad assignments before any work

  const std::vector<int> mult = m.mult_layers();
  const int n = samples.shape[0];

  // Re-calibration starts from the plain prepared model, not stale clip state.
  for (int li : mult) {
    Layer& l = m.layers[static_cast<size_t>(li)];
    if (!l.calibrated) continue;
    l.calibrated = false;
    l.clip_gamma = 0.0;
    l.clip_beta = 0.0;
    l.q_star = 0.0;
    l.qw = fit_params(std::span<const double>(l.weight.data), l.bits, 0.0);
  }

  CalibState st;
  st.epochs = opts.epochs;
  st.batch = opts.batch;

  // Phase 1: per-layer input-scale search in forward order. The reference
  // activations come from the all-exact model, cached once up front; the
  // approximate side is recomputed per layer so upstream re-fits are seen.
  const Assignment exact = Assignment::all_exact(m);
  ForwardOptions exact_opts;
  exact_opts.assignment = &exact;
  exact_opts.library = lib;
  const std::vector<Tensor> refs = collect_inputs(m, samples, exact_opts, mult);

  ForwardOptions approx_opts;
  approx_opts.assignment = &a;
  approx_opts.library = lib;
  for (size_t k = 0; k < mult.size(); ++k) {
    Layer& l = m.layers[static_cast<size_t>(mult[k])];
    const Tensor ax = std::move(collect_inputs(m, samples, approx_opts, {mult[k]})[0]);
    const ScaleSearch ss = input_scale_search(ax, refs[k], l.bits);
    l.qx = ss.params;
    l.q_star = ss.q_star;
    LayerCalib lc;
    lc.layer = static_cast<int>(k);
    lc.q_star = ss.q_star;
    lc.scale = ss.params.s;
    st.layers.push_back(lc);
  }

  // Phase 2: learnable weight clipping, plain gradient descent on all
  // gamma/beta jointly, one update per mini-batch.
  const double init = std::log(999.0);  // sig = 0.999: clipping starts inactive
  for (int li : mult) {
    Layer& l = m.layers[static_cast<size_t>(li)];
    l.calibrated = true;
    l.clip_gamma = init;
    l.clip_beta = init;
    requantize(l);
  }

  double lr = opts.lr;
  double first_loss = -1.0;
  for (int ep = 0; ep < opts.epochs; ++ep) {
    const LwcSnapshot at_epoch_start = snapshot(m, mult);
    bool restart = true;
    while (restart) {
      restart = false;
      double loss_sum = 0.0;
      int n_batches = 0;
      for (int s0 = 0; s0 < n; s0 += opts.batch) {
        const int nb = std::min(opts.batch, n - s0);
        const Tensor xb = slice_batch(samples, s0, nb);
        const std::vector<int> yb(labels.begin() + s0, labels.begin() + s0 + nb);

        ForwardOptions fo = approx_opts;
        fo.retain_trace = true;
        const ForwardTrace tr = forward(m, xb, fo);
        const LossResult lres = loss_ce(tr.logits, yb);
        if (first_loss < 0.0) first_loss = lres.loss;
        if (lres.loss > 10.0 * first_loss) {
          if (st.lr_halvings < 3) {
            ++st.lr_halvings;
            lr *= 0.5;
            restore(m, mult, at_epoch_start);
            restart = true;
            break;
          }
          st.diverged = true;  // out of halvings; keep going and report
        }

        const Tensor d_logits = loss_ce_backward(lres.probs, yb);
        const BackwardResult bw = backward(m, tr, d_logits, fo, true);
        for (int li : mult) {
          Layer& l = m.layers[static_cast<size_t>(li)];
          const Tensor w_eff = effective_weight(l);
          const LwcGradients g =
              lwc_gradients(l.weight, w_eff, l.clip_gamma, l.clip_beta,
                            bw.d_w[static_cast<size_t>(li)]);
          l.clip_gamma -= lr * g.d_gamma;
          l.clip_beta -= lr * g.d_beta;
          requantize(l);
        }
        loss_sum += lres.loss;
        ++n_batches;
      }
      if (!restart)
        st.epoch_loss.push_back(n_batches > 0 ? loss_sum / n_batches : 0.0);
    }
  }

  st.lr = lr;
  for (size_t k = 0; k < mult.size(); ++k) {
    const Layer& l = m.layers[static_cast<size_t>(mult[k])];
    st.layers[k].gamma = l.clip_gamma;
    st.layers[k].beta = l.clip_beta;
    st.layers[k].scale = l.qx.s;
  }
  return st;
}

}  // namespace axmul
