#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "axmul/mullib.hpp"
#include "axmul/quant.hpp"
#include "axmul/tensor.hpp"

namespace axmul {

enum class LayerKind : uint8_t {
  Conv = 0,
  Linear = 1,
  Relu = 2,
  MaxPool = 3,
  AvgPool = 4,
  Flatten = 5,
  Add = 6,
  BatchNorm = 7,
};

const char* layer_kind_name(LayerKind k);

struct Layer {
  LayerKind kind = LayerKind::Relu;

  // conv / linear; pooling reuses kh/kw/stride as its window
  int in_ch = 0, out_ch = 0;
  int kh = 0, kw = 0;
  int stride = 1, pad = 0;
  Tensor weight;  // conv [out,in,kh,kw]; linear [out,in]
  Tensor bias;    // [out]

  // quantization state of multiplicative layers (set by prepare)
  int bits = 0;
  bool prepared = false;
  QuantParams qx, qw;

  // learned weight-clipping state (set by calibrate); pre-sigmoid scalars
  bool calibrated = false;
  double clip_gamma = 0.0;
  double clip_beta = 0.0;
  double q_star = 0.0;  // input-scale search result, kept for reporting

  // residual add: index of the earlier layer whose output is added in
  // the dequantized (real) domain
  int skip_from = -1;

  // batch norm inference statistics; folded away before quantization
  Tensor bn_gamma, bn_beta, bn_mean, bn_var;
  double bn_eps = 1e-5;

  bool multiplicative() const { return kind == LayerKind::Conv || kind == LayerKind::Linear; }
};

Layer make_conv(int in_ch, int out_ch, int k, int stride, int pad);
Layer make_linear(int in_features, int out_features);
Layer make_relu();
Layer make_maxpool(int k, int stride);
Layer make_avgpool(int k, int stride);
Layer make_flatten();
Layer make_add(int skip_from);
Layer make_batchnorm(int channels);

struct ModelGraph {
  int in_ch = 1, in_h = 28, in_w = 28;
  int n_classes = 10;
  std::vector<Layer> layers;

  // Indices of conv/linear layers in forward order; their position in this
  // list is the layer id `k` used by assignments, tables, and solutions.
  std::vector<int> mult_layers() const;
  std::vector<std::array<int, 3>> output_shapes() const;  // per layer {C,H,W}
  void validate() const;
  bool prepared() const;
};

// Per-layer multiplication geometry (output dims resolved against the input).
struct ConvGeom {
  int n_in = 0, in_h = 0, in_w = 0;
  int n_out = 0, out_h = 0, out_w = 0;
  int kh = 0, kw = 0, stride = 1, pad = 0;

  int64_t window_terms() const { return static_cast<int64_t>(n_in) * kh * kw; }
  int64_t mults_per_sample() const {
    return static_cast<int64_t>(n_out) * out_h * out_w * window_terms();
  }
};

ConvGeom conv_geometry(const Layer& l, int in_c, int in_h, int in_w);
std::vector<ConvGeom> mult_geometries(const ModelGraph& m);

// Map multiplicative layer id k -> multiplier name. The literal name
// "exact" resolves to the exact multiplier of the layer's bit group.
struct Assignment {
  std::map<int, std::string> mul_by_layer;

  static Assignment all_exact(const ModelGraph& m);
  bool is_exact_name(int k) const;
  const std::string& name_for(int k) const;
};

// Resolved per-ordinal multiplier pointers; nullptr = exact integer path.
std::vector<const LutMultiplier*> resolve_assignment(const ModelGraph& m,
                                                     const MultiplierLibrary* lib,
                                                     const Assignment& a);

struct LayerTrace {
  Tensor y;                          // layer output, real domain [N,C,H,W]
  IntTensor x_codes;                 // mult layers: quantized input codes
  IntTensor w_codes;                 // mult layers: weight codes (shared across batch)
  std::vector<uint8_t> x_in_range;   // straight-through mask for the input tensor
  int32_t pad_code = 0;              // code used for padded positions
  IntTensor argmax;                  // maxpool: flat input offset per output element
};

struct ForwardTrace {
  Tensor input;                      // [N,C,H,W]
  std::vector<LayerTrace> layers;
  Tensor logits;                     // [N, K]
};

struct ForwardOptions {
  // Quantized execution iff assignment != nullptr (library may be null when
  // every layer maps to "exact"). Otherwise runs the float path.
  const Assignment* assignment = nullptr;
  const MultiplierLibrary* library = nullptr;
  bool retain_trace = false;

  // Additive product-error injection per layer id k: flattened matrix over
  // code pairs (length 2^(bits_x+bits_w)), applied inside the convolution in
  // real arithmetic. Used by the finite-difference harnesses.
  const std::map<int, std::vector<double>>* injected_error = nullptr;
};

ForwardTrace forward(const ModelGraph& m, const Tensor& batch, const ForwardOptions& opts);

struct LossResult {
  double loss = 0.0;
  Tensor probs;  // [N, K]
};

LossResult loss_ce(const Tensor& logits, const std::vector<int>& labels);

// Gradient of the batch-mean cross-entropy w.r.t. logits: (p - onehot)/N.
Tensor loss_ce_backward(const Tensor& probs, const std::vector<int>& labels);

struct BackwardResult {
  std::vector<Tensor> d_y;  // per layer: grad w.r.t. the layer's output
  std::vector<Tensor> d_w;  // mult layers: grad w.r.t. effective float weights (STE)
  std::vector<Tensor> d_b;
  Tensor d_input;
  Tensor d_logits;
};

// Reverse-mode pass. `opts` must describe the same execution that produced
// `trace`. Quantization rounding and LUT products are handled by the
// straight-through estimator: identity inside the clip range, zero outside.
BackwardResult backward(const ModelGraph& m, const ForwardTrace& trace, const Tensor& d_logits,
                        const ForwardOptions& opts, bool need_weight_grads);

// Weights actually fed to quantization: clip(W, sig(gamma)*min W, sig(beta)*max W)
// once calibrated, the raw weights before that.
Tensor effective_weight(const Layer& l);

// Absorbs batchnorm layers into the preceding conv; forward outputs are
// unchanged up to roundoff. Skip indices are remapped.
ModelGraph fold_batchnorm(ModelGraph m);

// Layer input accessor against a retained trace.
const Tensor& input_of(const ForwardTrace& trace, int layer_index);

double mean_relative_error(const Tensor& a, const Tensor& ref, double eps = 1e-8);

double sigmoid(double x);

}  // namespace axmul
