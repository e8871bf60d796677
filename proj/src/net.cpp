#include "axmul/net.hpp"

#include <algorithm>
#include <cmath>

#include "axmul/errors.hpp"
#include "axmul/parallel.hpp"

namespace axmul {

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv2d";
    case LayerKind::Linear: return "linear";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Add: return "add";
    case LayerKind::BatchNorm: return "batchnorm";
  }
  return "?";
}

Layer make_conv(int in_ch, int out_ch, int k, int stride, int pad) {
  Layer l;
  l.kind = LayerKind::Conv;
  l.in_ch = in_ch;
  l.out_ch = out_ch;
  l.kh = l.kw = k;
  l.stride = stride;
  l.pad = pad;
  l.weight = Tensor({out_ch, in_ch, k, k});
  l.bias = Tensor({out_ch});
  return l;
}

Layer make_linear(int in_features, int out_features) {
  Layer l;
  l.kind = LayerKind::Linear;
  l.in_ch = in_features;
  l.out_ch = out_features;
  l.kh = l.kw = 1;
  l.stride = 1;
  l.pad = 0;
  l.weight = Tensor({out_features, in_features});
  l.bias = Tensor({out_features});
  return l;
}

Layer make_relu() {
  Layer l;
  l.kind = LayerKind::Relu;
  return l;
}

Layer make_maxpool(int k, int stride) {
  Layer l;
  l.kind = LayerKind::MaxPool;
  l.kh = l.kw = k;
  l.stride = stride;
  return l;
}

Layer make_avgpool(int k, int stride) {
  Layer l;
  l.kind = LayerKind::AvgPool;
  l.kh = l.kw = k;
  l.stride = stride;
  return l;
}

Layer make_flatten() {
  Layer l;
  l.kind = LayerKind::Flatten;
  return l;
}

Layer make_add(int skip_from) {
  Layer l;
  l.kind = LayerKind::Add;
  l.skip_from = skip_from;
  return l;
}

Layer make_batchnorm(int channels) {
  Layer l;
  l.kind = LayerKind::BatchNorm;
  l.in_ch = l.out_ch = channels;
  l.bn_gamma = Tensor({channels}, std::vector<double>(static_cast<size_t>(channels), 1.0));
  l.bn_beta = Tensor({channels});
  l.bn_mean = Tensor({channels});
  l.bn_var = Tensor({channels}, std::vector<double>(static_cast<size_t>(channels), 1.0));
  return l;
}

std::vector<int> ModelGraph::mult_layers() const {
  std::vector<int> out;
  for (size_t i = 0; i < layers.size(); ++i)
    if (layers[i].multiplicative()) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<std::array<int, 3>> ModelGraph::output_shapes() const {
  std::vector<std::array<int, 3>> shapes;
  int c = in_ch, h = in_h, w = in_w;
  for (size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    switch (l.kind) {
      case LayerKind::Conv: {
        if (c != l.in_ch)
          throw ConfigError("layer " + std::to_string(i) + ": conv expects " +
                            std::to_string(l.in_ch) + " channels, input has " + std::to_string(c));
        ConvGeom g = conv_geometry(l, c, h, w);
        c = g.n_out;
        h = g.out_h;
        w = g.out_w;
        break;
      }
      case LayerKind::Linear:
        if (h != 1 || w != 1 || c != l.in_ch)
          throw ConfigError("layer " + std::to_string(i) +
                            ": linear expects flattened input of " + std::to_string(l.in_ch) +
                            " features, got " + std::to_string(c) + "x" + std::to_string(h) + "x" +
                            std::to_string(w));
        c = l.out_ch;
        h = w = 1;
        break;
      case LayerKind::Relu:
        break;
      case LayerKind::MaxPool:
      case LayerKind::AvgPool: {
        int oh = (h - l.kh) / l.stride + 1;
        int ow = (w - l.kw) / l.stride + 1;
        if (l.kh > h || l.kw > w)
          throw ConfigError("layer " + std::to_string(i) + ": pool window exceeds input");
        h = oh;
        w = ow;
        break;
      }
      case LayerKind::Flatten:
        c = c * h * w;
        h = w = 1;
        break;
      case LayerKind::Add: {
        if (l.skip_from < 0 || l.skip_from >= static_cast<int>(i))
          throw ConfigError("layer " + std::to_string(i) + ": add references layer " +
                            std::to_string(l.skip_from));
        auto& s = shapes[static_cast<size_t>(l.skip_from)];
        if (s[0] != c || s[1] != h || s[2] != w)
          throw ConfigError("layer " + std::to_string(i) + ": add operand shapes differ");
        break;
      }
      case LayerKind::BatchNorm:
        if (l.in_ch != c)
          throw ConfigError("layer " + std::to_string(i) + ": batchnorm channel mismatch");
        break;
    }
    shapes.push_back({c, h, w});
  }
  return shapes;
}

void ModelGraph::validate() const {
  if (layers.empty()) throw ConfigError("model has no layers");
  auto shapes = output_shapes();
  auto& last = shapes.back();
  if (last[0] * last[1] * last[2] != n_classes)
    throw ConfigError("model tail produces " +
                      std::to_string(last[0] * last[1] * last[2]) + " values, expected " +
                      std::to_string(n_classes) + " classes");
}

bool ModelGraph::prepared() const {
  for (const Layer& l : layers)
    if (l.multiplicative() && !l.prepared) return false;
  return true;
}

ConvGeom conv_geometry(const Layer& l, int in_c, int in_h, int in_w) {
  ConvGeom g;
  g.n_in = in_c;
  g.in_h = in_h;
  g.in_w = in_w;
  g.n_out = l.out_ch;
  g.kh = l.kh;
  g.kw = l.kw;
  g.stride = l.stride;
  g.pad = l.pad;
  g.out_h = (in_h + 2 * l.pad - l.kh) / l.stride + 1;
  g.out_w = (in_w + 2 * l.pad - l.kw) / l.stride + 1;
  if (g.out_h <= 0 || g.out_w <= 0) throw ConfigError("convolution output collapses to zero size");
  return g;
}

std::vector<ConvGeom> mult_geometries(const ModelGraph& m) {
  std::vector<ConvGeom> out;
  auto shapes = m.output_shapes();
  for (int li : m.mult_layers()) {
    int c = li == 0 ? m.in_ch : shapes[static_cast<size_t>(li - 1)][0];
    int h = li == 0 ? m.in_h : shapes[static_cast<size_t>(li - 1)][1];
    int w = li == 0 ? m.in_w : shapes[static_cast<size_t>(li - 1)][2];
    out.push_back(conv_geometry(m.layers[static_cast<size_t>(li)], c, h, w));
  }
  return out;
}

Assignment Assignment::all_exact(const ModelGraph& m) {
  Assignment a;
  int n = static_cast<int>(m.mult_layers().size());
  for (int k = 0; k < n; ++k) a.mul_by_layer[k] = "exact";
  return a;
}

bool Assignment::is_exact_name(int k) const { return name_for(k) == "exact"; }

const std::string& Assignment::name_for(int k) const {
  auto it = mul_by_layer.find(k);
  if (it == mul_by_layer.end())
    throw ConfigError("assignment is missing multiplicative layer " + std::to_string(k));
  return it->second;
}

std::vector<const LutMultiplier*> resolve_assignment(const ModelGraph& m,
                                                     const MultiplierLibrary* lib,
                                                     const Assignment& a) {
  auto mult = m.mult_layers();
  std::vector<const LutMultiplier*> out(mult.size(), nullptr);
  for (size_t k = 0; k < mult.size(); ++k) {
    const std::string& name = a.name_for(static_cast<int>(k));
    if (name == "exact") continue;
    if (!lib) throw ConfigError("assignment names multiplier '" + name + "' but no library is loaded");
    const LutMultiplier* mul = lib->find(name);
    if (!mul) throw ConfigError("assignment references unknown multiplier '" + name + "'");
    const Layer& l = m.layers[static_cast<size_t>(mult[k])];
    if (mul->bitwidth_a != l.bits || mul->bitwidth_b != l.bits)
      throw ConfigError("multiplier '" + name + "' is " + std::to_string(mul->bitwidth_a) + "x" +
                        std::to_string(mul->bitwidth_b) + " but layer " + std::to_string(k) +
                        " is quantized to " + std::to_string(l.bits) + " bits");
    if (mul->provenance == Provenance::Exact) continue;  // same integer path, skip the table
    out[k] = mul;
  }
  return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Tensor effective_weight(const Layer& l) {
  if (!l.calibrated) return l.weight;
  double w_min = *std::min_element(l.weight.data.begin(), l.weight.data.end());
  double w_max = *std::max_element(l.weight.data.begin(), l.weight.data.end());
  double lo = sigmoid(l.clip_gamma) * w_min;
  double hi = sigmoid(l.clip_beta) * w_max;
  if (hi < lo) hi = lo;
  Tensor out = l.weight;
  for (double& v : out.data) v = std::clamp(v, lo, hi);
  return out;
}

namespace {

enum class ProdMode { Exact, Lut };

struct QuantConvArgs {
  ConvGeom g;
  QuantParams qx, qw;
  const int32_t* wc = nullptr;       // weight codes [O,C,KH,KW]
  const double* bias = nullptr;
  const int32_t* lut = nullptr;      // 2^a x 2^b row-major
  const double* inject = nullptr;    // same indexing as lut
  int32_t pad_code = 0;
  int lut_cols = 0;
  const int64_t* sum_w = nullptr;    // per output channel
};

template <ProdMode MODE>
void conv_sample_quant(const QuantConvArgs& a, const int32_t* xc, double* out) {
  const ConvGeom& g = a.g;
  const double sx = a.qx.s, bx = a.qx.b, sw = a.qw.s, bw = a.qw.b;
  const double terms = static_cast<double>(g.window_terms());
  const size_t in_plane = static_cast<size_t>(g.in_h) * g.in_w;
  const size_t out_plane = static_cast<size_t>(g.out_h) * g.out_w;

  // Input-window code sums feed the affine offset terms; padded positions
  // carry the code of real zero.
  std::vector<int64_t> win_sum(out_plane, 0);
  for (int oy = 0; oy < g.out_h; ++oy)
    for (int ox = 0; ox < g.out_w; ++ox) {
      int64_t s = 0;
      for (int c = 0; c < g.n_in; ++c)
        for (int ky = 0; ky < g.kh; ++ky)
          for (int kx = 0; kx < g.kw; ++kx) {
            int iy = oy * g.stride + ky - g.pad;
            int ix = ox * g.stride + kx - g.pad;
            bool in = iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w;
            s += in ? xc[c * in_plane + static_cast<size_t>(iy) * g.in_w + ix] : a.pad_code;
          }
      win_sum[static_cast<size_t>(oy) * g.out_w + ox] = s;
    }

  const size_t kvol = static_cast<size_t>(g.n_in) * g.kh * g.kw;
  for (int o = 0; o < g.n_out; ++o) {
    const int32_t* wc_o = a.wc + static_cast<size_t>(o) * kvol;
    for (int oy = 0; oy < g.out_h; ++oy)
      for (int ox = 0; ox < g.out_w; ++ox) {
        int64_t acc = 0;
        double inj = 0.0;
        size_t ki = 0;
        for (int c = 0; c < g.n_in; ++c)
          for (int ky = 0; ky < g.kh; ++ky)
            for (int kx = 0; kx < g.kw; ++kx, ++ki) {
              int iy = oy * g.stride + ky - g.pad;
              int ix = ox * g.stride + kx - g.pad;
              bool in = iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w;
              int32_t code_x = in ? xc[c * in_plane + static_cast<size_t>(iy) * g.in_w + ix] : a.pad_code;
              int32_t code_w = wc_o[ki];
              if constexpr (MODE == ProdMode::Exact) {
                acc += static_cast<int64_t>(code_x) * code_w;
              } else {
                acc += a.lut[static_cast<size_t>(code_x) * a.lut_cols + code_w];
              }
              if (a.inject) inj += a.inject[static_cast<size_t>(code_x) * a.lut_cols + code_w];
            }
        double y = sx * sw * static_cast<double>(acc) +
                   sx * bw * static_cast<double>(win_sum[static_cast<size_t>(oy) * g.out_w + ox]) +
                   sw * bx * static_cast<double>(a.sum_w[o]) + terms * bx * bw;
        y += sx * sw * inj;
        if (a.bias) y += a.bias[o];
        out[o * out_plane + static_cast<size_t>(oy) * g.out_w + ox] = y;
      }
  }
}

void conv_sample_float(const ConvGeom& g, const double* x, const double* w, const double* bias,
                       double* out) {
  const size_t in_plane = static_cast<size_t>(g.in_h) * g.in_w;
  const size_t out_plane = static_cast<size_t>(g.out_h) * g.out_w;
  const size_t kvol = static_cast<size_t>(g.n_in) * g.kh * g.kw;
  for (int o = 0; o < g.n_out; ++o) {
    const double* w_o = w + static_cast<size_t>(o) * kvol;
    for (int oy = 0; oy < g.out_h; ++oy)
      for (int ox = 0; ox < g.out_w; ++ox) {
        double acc = 0.0;
        size_t ki = 0;
        for (int c = 0; c < g.n_in; ++c)
          for (int ky = 0; ky < g.kh; ++ky)
            for (int kx = 0; kx < g.kw; ++kx, ++ki) {
              int iy = oy * g.stride + ky - g.pad;
              int ix = ox * g.stride + kx - g.pad;
              if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
              acc += x[c * in_plane + static_cast<size_t>(iy) * g.in_w + ix] * w_o[ki];
            }
        if (bias) acc += bias[o];
        out[o * out_plane + static_cast<size_t>(oy) * g.out_w + ox] = acc;
      }
  }
}

int64_t weight_code_sum(const int32_t* wc, size_t kvol) {
  int64_t s = 0;
  for (size_t i = 0; i < kvol; ++i) s += wc[i];
  return s;
}

}  // namespace

ForwardTrace forward(const ModelGraph& m, const Tensor& batch, const ForwardOptions& opts) {
  if (batch.shape.size() != 4 || batch.dim(1) != m.in_ch || batch.dim(2) != m.in_h ||
      batch.dim(3) != m.in_w)
    throw ConfigError("input batch shape does not match model input");
  m.validate();
  const bool quant = opts.assignment != nullptr;
  if (quant && !m.prepared()) throw ConfigError("quantized forward on unprepared model");

  std::vector<const LutMultiplier*> muls;
  if (quant) muls = resolve_assignment(m, opts.library, *opts.assignment);

  const int n = batch.dim(0);
  auto shapes = m.output_shapes();

  ForwardTrace tr;
  tr.input = batch;
  tr.layers.resize(m.layers.size());

  const Tensor* cur = &tr.input;
  int cur_c = m.in_ch, cur_h = m.in_h, cur_w = m.in_w;
  int mult_k = -1;

  for (size_t li = 0; li < m.layers.size(); ++li) {
    const Layer& l = m.layers[li];
    LayerTrace& lt = tr.layers[li];
    auto& os = shapes[li];
    lt.y = Tensor({n, os[0], os[1], os[2]});

    switch (l.kind) {
      case LayerKind::Conv:
      case LayerKind::Linear: {
        ++mult_k;
        ConvGeom g = conv_geometry(l, cur_c, cur_h, cur_w);
        const size_t in_sz = static_cast<size_t>(cur_c) * cur_h * cur_w;
        const size_t out_sz = static_cast<size_t>(os[0]) * os[1] * os[2];

        if (!quant) {
          const double* w = l.weight.data.data();
          parallel_blocks(n, [&](int, int begin, int end) {
            for (int s = begin; s < end; ++s)
              conv_sample_float(g, cur->data.data() + static_cast<size_t>(s) * in_sz, w,
                                l.bias.data.data(), lt.y.data.data() + static_cast<size_t>(s) * out_sz);
          });
          break;
        }

        const LutMultiplier* mul = muls[static_cast<size_t>(mult_k)];
        Tensor w_eff = effective_weight(l);
        QuantTensor wq = quantize(w_eff, l.qw);
        lt.w_codes = std::move(wq.codes);
        lt.pad_code = zero_code(l.qx);

        QuantTensor xq = quantize(*cur, l.qx, &lt.x_in_range);
        lt.x_codes = std::move(xq.codes);

        const size_t kvol = static_cast<size_t>(g.n_in) * g.kh * g.kw;
        std::vector<int64_t> sum_w(static_cast<size_t>(g.n_out));
        for (int o = 0; o < g.n_out; ++o)
          sum_w[static_cast<size_t>(o)] =
              weight_code_sum(lt.w_codes.data.data() + static_cast<size_t>(o) * kvol, kvol);

        QuantConvArgs args;
        args.g = g;
        args.qx = l.qx;
        args.qw = l.qw;
        args.wc = lt.w_codes.data.data();
        args.bias = l.bias.data.data();
        args.pad_code = lt.pad_code;
        args.lut_cols = 1 << l.qw.bits;
        args.sum_w = sum_w.data();
        if (mul) {
          args.lut = mul->table.data();
        }
        if (opts.injected_error) {
          auto it = opts.injected_error->find(mult_k);
          if (it != opts.injected_error->end()) {
            if (it->second.size() != static_cast<size_t>(1) << (2 * l.bits))
              throw ConfigError("injected error vector has wrong length for layer " +
                                std::to_string(mult_k));
            args.inject = it->second.data();
          }
        }

        parallel_blocks(n, [&](int, int begin, int end) {
          for (int s = begin; s < end; ++s) {
            const int32_t* xc = lt.x_codes.data.data() + static_cast<size_t>(s) * in_sz;
            double* out = lt.y.data.data() + static_cast<size_t>(s) * out_sz;
            if (mul)
              conv_sample_quant<ProdMode::Lut>(args, xc, out);
            else
              conv_sample_quant<ProdMode::Exact>(args, xc, out);
          }
        });
        break;
      }

      case LayerKind::Relu:
        parallel_blocks(n, [&](int, int begin, int end) {
          size_t sz = static_cast<size_t>(os[0]) * os[1] * os[2];
          for (int s = begin; s < end; ++s) {
            const double* x = cur->data.data() + static_cast<size_t>(s) * sz;
            double* y = lt.y.data.data() + static_cast<size_t>(s) * sz;
            for (size_t i = 0; i < sz; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
          }
        });
        break;

      case LayerKind::MaxPool: {
        lt.argmax = IntTensor({n, os[0], os[1], os[2]});
        const size_t in_plane = static_cast<size_t>(cur_h) * cur_w;
        const size_t in_sz = static_cast<size_t>(cur_c) * in_plane;
        const size_t out_sz = static_cast<size_t>(os[0]) * os[1] * os[2];
        parallel_blocks(n, [&](int, int begin, int end) {
          for (int s = begin; s < end; ++s) {
            const double* x = cur->data.data() + static_cast<size_t>(s) * in_sz;
            double* y = lt.y.data.data() + static_cast<size_t>(s) * out_sz;
            int32_t* am = lt.argmax.data.data() + static_cast<size_t>(s) * out_sz;
            size_t oi = 0;
            for (int c = 0; c < os[0]; ++c)
              for (int oy = 0; oy < os[1]; ++oy)
                for (int ox = 0; ox < os[2]; ++ox, ++oi) {
                  double best = -1e300;
                  size_t best_idx = 0;
                  for (int ky = 0; ky < l.kh; ++ky)
                    for (int kx = 0; kx < l.kw; ++kx) {
                      size_t idx = c * in_plane +
                                   static_cast<size_t>(oy * l.stride + ky) * cur_w +
                                   static_cast<size_t>(ox * l.stride + kx);
                      if (x[idx] > best) {
                        best = x[idx];
                        best_idx = idx;
                      }
                    }
                  y[oi] = best;
                  am[oi] = static_cast<int32_t>(best_idx);
                }
          }
        });
        break;
      }

      case LayerKind::AvgPool: {
        const size_t in_plane = static_cast<size_t>(cur_h) * cur_w;
        const size_t in_sz = static_cast<size_t>(cur_c) * in_plane;
        const size_t out_sz = static_cast<size_t>(os[0]) * os[1] * os[2];
        const double inv = 1.0 / (l.kh * l.kw);
        parallel_blocks(n, [&](int, int begin, int end) {
          for (int s = begin; s < end; ++s) {
            const double* x = cur->data.data() + static_cast<size_t>(s) * in_sz;
            double* y = lt.y.data.data() + static_cast<size_t>(s) * out_sz;
            size_t oi = 0;
            for (int c = 0; c < os[0]; ++c)
              for (int oy = 0; oy < os[1]; ++oy)
                for (int ox = 0; ox < os[2]; ++ox, ++oi) {
                  double acc = 0.0;
                  for (int ky = 0; ky < l.kh; ++ky)
                    for (int kx = 0; kx < l.kw; ++kx)
                      acc += x[c * in_plane + static_cast<size_t>(oy * l.stride + ky) * cur_w +
                               static_cast<size_t>(ox * l.stride + kx)];
                  y[oi] = acc * inv;
                }
          }
        });
        break;
      }

      case LayerKind::Flatten:
        lt.y.data = cur->data;  // same element order, new shape
        break;

      case LayerKind::Add: {
        const Tensor& skip = tr.layers[static_cast<size_t>(l.skip_from)].y;
        if (skip.data.size() != cur->data.size())
          throw ConfigError("add operand size mismatch");
        for (size_t i = 0; i < cur->data.size(); ++i) lt.y.data[i] = cur->data[i] + skip.data[i];
        break;
      }

      case LayerKind::BatchNorm: {
        if (quant)
          throw ConfigError("batchnorm must be folded before quantized execution");
        const size_t plane = static_cast<size_t>(cur_h) * cur_w;
        const size_t ch_sz = static_cast<size_t>(cur_c) * plane;
        parallel_blocks(n, [&](int, int begin, int end) {
          for (int s = begin; s < end; ++s)
            for (int c = 0; c < cur_c; ++c) {
              double scale = l.bn_gamma.data[static_cast<size_t>(c)] /
                             std::sqrt(l.bn_var.data[static_cast<size_t>(c)] + l.bn_eps);
              double shift = l.bn_beta.data[static_cast<size_t>(c)] -
                             l.bn_mean.data[static_cast<size_t>(c)] * scale;
              const double* x = cur->data.data() + static_cast<size_t>(s) * ch_sz + c * plane;
              double* y = lt.y.data.data() + static_cast<size_t>(s) * ch_sz + c * plane;
              for (size_t i = 0; i < plane; ++i) y[i] = x[i] * scale + shift;
            }
        });
        break;
      }
    }

    cur = &lt.y;
    cur_c = os[0];
    cur_h = os[1];
    cur_w = os[2];
  }

  tr.logits = Tensor({n, m.n_classes});
  tr.logits.data = cur->data;

  if (!opts.retain_trace) {
    for (auto& lt : tr.layers) {
      lt.y = Tensor();
      lt.x_codes = IntTensor();
      lt.w_codes = IntTensor();
      lt.x_in_range.clear();
      lt.argmax = IntTensor();
    }
    tr.layers.clear();
    tr.input = Tensor();
  }
  return tr;
}

LossResult loss_ce(const Tensor& logits, const std::vector<int>& labels) {
  const int n = logits.dim(0);
  const int k = logits.dim(1);
  if (static_cast<size_t>(n) != labels.size())
    throw ConfigError("label count does not match batch size");
  LossResult r;
  r.probs = Tensor({n, k});

  // Per-sample losses summed in fixed blocks so the result is independent
  // of the worker count.
  std::vector<double> block_loss(static_cast<size_t>(block_count(n)), 0.0);
  parallel_blocks(n, [&](int b, int begin, int end) {
    double acc = 0.0;
    for (int s = begin; s < end; ++s) {
      int label = labels[static_cast<size_t>(s)];
      if (label < 0 || label >= k)
        throw ConfigError("label " + std::to_string(label) + " out of range for " +
                          std::to_string(k) + " classes");
      const double* z = logits.data.data() + static_cast<size_t>(s) * k;
      double* p = r.probs.data.data() + static_cast<size_t>(s) * k;
      double zmax = z[0];
      for (int i = 1; i < k; ++i) zmax = std::max(zmax, z[i]);
      double sum = 0.0;
      for (int i = 0; i < k; ++i) sum += std::exp(z[i] - zmax);
      double log_sum = std::log(sum) + zmax;
      for (int i = 0; i < k; ++i) p[i] = std::exp(z[i] - log_sum);
      acc += log_sum - z[label];
    }
    block_loss[static_cast<size_t>(b)] = acc;
  });
  double total = 0.0;
  for (double v : block_loss) total += v;
  r.loss = total / n;
  return r;
}

Tensor loss_ce_backward(const Tensor& probs, const std::vector<int>& labels) {
  const int n = probs.dim(0);
  const int k = probs.dim(1);
  Tensor d({n, k});
  const double inv = 1.0 / n;
  for (int s = 0; s < n; ++s) {
    const double* p = probs.data.data() + static_cast<size_t>(s) * k;
    double* g = d.data.data() + static_cast<size_t>(s) * k;
    for (int i = 0; i < k; ++i) g[i] = p[i] * inv;
    g[labels[static_cast<size_t>(s)]] -= inv;
  }
  return d;
}

namespace {

// Per-sample conv backward. Writes d_x for its own sample; accumulates d_w
// and d_b into caller-provided block partials.
void conv_backward_sample(const ConvGeom& g, const double* g_out, const double* w, const double* x_deq,
                          double pad_x, bool include_pad_in_dw, double* g_in, double* d_w, double* d_b) {
  const size_t in_plane = static_cast<size_t>(g.in_h) * g.in_w;
  const size_t out_plane = static_cast<size_t>(g.out_h) * g.out_w;
  const size_t kvol = static_cast<size_t>(g.n_in) * g.kh * g.kw;
  for (int o = 0; o < g.n_out; ++o) {
    const double* w_o = w + static_cast<size_t>(o) * kvol;
    double* dw_o = d_w ? d_w + static_cast<size_t>(o) * kvol : nullptr;
    for (int oy = 0; oy < g.out_h; ++oy)
      for (int ox = 0; ox < g.out_w; ++ox) {
        double go = g_out[o * out_plane + static_cast<size_t>(oy) * g.out_w + ox];
        if (d_b) d_b[o] += go;
        if (go == 0.0) continue;
        size_t ki = 0;
        for (int c = 0; c < g.n_in; ++c)
          for (int ky = 0; ky < g.kh; ++ky)
            for (int kx = 0; kx < g.kw; ++kx, ++ki) {
              int iy = oy * g.stride + ky - g.pad;
              int ix = ox * g.stride + kx - g.pad;
              bool in = iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w;
              if (in) {
                size_t idx = c * in_plane + static_cast<size_t>(iy) * g.in_w + ix;
                g_in[idx] += go * w_o[ki];
                if (dw_o) dw_o[ki] += go * x_deq[idx];
              } else if (dw_o && include_pad_in_dw) {
                dw_o[ki] += go * pad_x;
              }
            }
      }
  }
}

}  // namespace

const Tensor& input_of(const ForwardTrace& trace, int layer_index) {
  return layer_index == 0 ? trace.input : trace.layers[static_cast<size_t>(layer_index - 1)].y;
}

BackwardResult backward(const ModelGraph& m, const ForwardTrace& trace, const Tensor& d_logits,
                        const ForwardOptions& opts, bool need_weight_grads) {
  if (trace.layers.size() != m.layers.size())
    throw ConfigError("backward requires a retained forward trace");
  const bool quant = opts.assignment != nullptr;
  const int n = trace.input.dim(0);
  const int n_blocks = block_count(n);

  BackwardResult r;
  r.d_logits = d_logits;
  r.d_y.resize(m.layers.size());
  r.d_w.resize(m.layers.size());
  r.d_b.resize(m.layers.size());
  for (size_t i = 0; i < m.layers.size(); ++i) r.d_y[i] = Tensor(trace.layers[i].y.shape);
  r.d_input = Tensor(trace.input.shape);

  // Seed: logits are the last layer's output reshaped.
  r.d_y.back().data = d_logits.data;

  for (int li = static_cast<int>(m.layers.size()) - 1; li >= 0; --li) {
    const Layer& l = m.layers[static_cast<size_t>(li)];
    const LayerTrace& lt = trace.layers[static_cast<size_t>(li)];
    const Tensor& g_out = r.d_y[static_cast<size_t>(li)];
    Tensor& g_in = li == 0 ? r.d_input : r.d_y[static_cast<size_t>(li - 1)];
    const Tensor& x_in = input_of(trace, li);
    const int in_c = x_in.dim(1), in_h = x_in.dim(2), in_w = x_in.dim(3);
    const size_t in_sz = static_cast<size_t>(in_c) * in_h * in_w;
    const size_t out_sz = g_out.data.size() / static_cast<size_t>(n);

    switch (l.kind) {
      case LayerKind::Conv:
      case LayerKind::Linear: {
        ConvGeom g = conv_geometry(l, in_c, in_h, in_w);

        // Weights as the forward saw them.
        Tensor w_used;
        if (!quant) {
          w_used = l.weight;
        } else {
          QuantTensor tmp;
          tmp.codes = lt.w_codes;
          tmp.params = l.qw;
          w_used = dequantize(tmp);
        }

        // Dequantized input as seen through the straight-through estimator.
        Tensor x_deq;
        double pad_x = 0.0;
        if (quant && need_weight_grads) {
          QuantTensor tmp;
          tmp.codes = lt.x_codes;
          tmp.params = l.qx;
          x_deq = dequantize(tmp);
          pad_x = dequantize_value(lt.pad_code, l.qx);
        }
        const double* x_for_dw = quant ? x_deq.data.data() : x_in.data.data();

        std::vector<Tensor> dw_blocks, db_blocks;
        if (need_weight_grads) {
          dw_blocks.assign(static_cast<size_t>(n_blocks), Tensor(l.weight.shape));
          db_blocks.assign(static_cast<size_t>(n_blocks), Tensor(l.bias.shape));
        }

        parallel_blocks(n, [&](int b, int begin, int end) {
          double* dw = need_weight_grads ? dw_blocks[static_cast<size_t>(b)].data.data() : nullptr;
          double* db = need_weight_grads ? db_blocks[static_cast<size_t>(b)].data.data() : nullptr;
          std::vector<double> scratch(in_sz);
          for (int s = begin; s < end; ++s) {
            std::fill(scratch.begin(), scratch.end(), 0.0);
            conv_backward_sample(g, g_out.data.data() + static_cast<size_t>(s) * out_sz,
                                 w_used.data.data(),
                                 need_weight_grads ? x_for_dw + static_cast<size_t>(s) * in_sz : nullptr,
                                 pad_x, quant, scratch.data(), dw, db);
            // Straight-through: this layer's input quantizer blocks gradients
            // for values that fell outside its clip range. The mask gates only
            // this layer's contribution; g_in may already hold gradient from
            // other consumers of the same tensor (a residual skip), which
            // passes through unmasked.
            const uint8_t* mask = quant ? lt.x_in_range.data() + static_cast<size_t>(s) * in_sz
                                        : nullptr;
            double* gi = g_in.data.data() + static_cast<size_t>(s) * in_sz;
            for (size_t i = 0; i < in_sz; ++i)
              if (!mask || mask[i]) gi[i] += scratch[i];
          }
        });

        if (need_weight_grads) {
          r.d_w[static_cast<size_t>(li)] = Tensor(l.weight.shape);
          r.d_b[static_cast<size_t>(li)] = Tensor(l.bias.shape);
          for (int b = 0; b < n_blocks; ++b) {
            for (size_t i = 0; i < l.weight.data.size(); ++i)
              r.d_w[static_cast<size_t>(li)].data[i] += dw_blocks[static_cast<size_t>(b)].data[i];
            for (size_t i = 0; i < l.bias.data.size(); ++i)
              r.d_b[static_cast<size_t>(li)].data[i] += db_blocks[static_cast<size_t>(b)].data[i];
          }
        }
        break;
      }

      case LayerKind::Relu:
        parallel_blocks(n, [&](int, int begin, int end) {
          for (int s = begin; s < end; ++s) {
            const double* y = lt.y.data.data() + static_cast<size_t>(s) * out_sz;
            const double* go = g_out.data.data() + static_cast<size_t>(s) * out_sz;
            double* gi = g_in.data.data() + static_cast<size_t>(s) * out_sz;
            for (size_t i = 0; i < out_sz; ++i) gi[i] += y[i] > 0.0 ? go[i] : 0.0;
          }
        });
        break;

      case LayerKind::MaxPool:
        parallel_blocks(n, [&](int, int begin, int end) {
          for (int s = begin; s < end; ++s) {
            const double* go = g_out.data.data() + static_cast<size_t>(s) * out_sz;
            const int32_t* am = lt.argmax.data.data() + static_cast<size_t>(s) * out_sz;
            double* gi = g_in.data.data() + static_cast<size_t>(s) * in_sz;
            for (size_t i = 0; i < out_sz; ++i) gi[static_cast<size_t>(am[i])] += go[i];
          }
        });
        break;

      case LayerKind::AvgPool: {
        const int oc = lt.y.dim(1), oh = lt.y.dim(2), ow = lt.y.dim(3);
        const double inv = 1.0 / (l.kh * l.kw);
        const size_t in_plane = static_cast<size_t>(in_h) * in_w;
        parallel_blocks(n, [&](int, int begin, int end) {
          for (int s = begin; s < end; ++s) {
            const double* go = g_out.data.data() + static_cast<size_t>(s) * out_sz;
            double* gi = g_in.data.data() + static_cast<size_t>(s) * in_sz;
            size_t oi = 0;
            for (int c = 0; c < oc; ++c)
              for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox, ++oi) {
                  double v = go[oi] * inv;
                  for (int ky = 0; ky < l.kh; ++ky)
                    for (int kx = 0; kx < l.kw; ++kx)
                      gi[c * in_plane + static_cast<size_t>(oy * l.stride + ky) * in_w +
                         static_cast<size_t>(ox * l.stride + kx)] += v;
                }
          }
        });
        break;
      }

      case LayerKind::Flatten:
        for (size_t i = 0; i < g_out.data.size(); ++i) g_in.data[i] += g_out.data[i];
        break;

      case LayerKind::Add:
        for (size_t i = 0; i < g_out.data.size(); ++i) g_in.data[i] += g_out.data[i];
        {
          Tensor& g_skip = r.d_y[static_cast<size_t>(l.skip_from)];
          for (size_t i = 0; i < g_out.data.size(); ++i) g_skip.data[i] += g_out.data[i];
        }
        break;

      case LayerKind::BatchNorm: {
        const size_t plane = static_cast<size_t>(in_h) * in_w;
        parallel_blocks(n, [&](int, int begin, int end) {
          for (int s = begin; s < end; ++s)
            for (int c = 0; c < in_c; ++c) {
              double scale = l.bn_gamma.data[static_cast<size_t>(c)] /
                             std::sqrt(l.bn_var.data[static_cast<size_t>(c)] + l.bn_eps);
              const double* go =
                  g_out.data.data() + static_cast<size_t>(s) * out_sz + c * plane;
              double* gi = g_in.data.data() + static_cast<size_t>(s) * in_sz + c * plane;
              for (size_t i = 0; i < plane; ++i) gi[i] += go[i] * scale;
            }
        });
        break;
      }
    }
  }
  return r;
}

ModelGraph fold_batchnorm(ModelGraph m) {
  std::vector<Layer> out;
  std::vector<int> remap(m.layers.size());
  for (size_t i = 0; i < m.layers.size(); ++i) {
    Layer& l = m.layers[i];
    if (l.kind != LayerKind::BatchNorm) {
      remap[i] = static_cast<int>(out.size());
      out.push_back(std::move(l));
      continue;
    }
    if (out.empty() || out.back().kind != LayerKind::Conv)
      throw ConfigError("batchnorm at layer " + std::to_string(i) +
                        " is not preceded by a convolution; cannot fold");
    Layer& conv = out.back();
    if (conv.out_ch != l.in_ch) throw ConfigError("batchnorm channel count does not match conv");
    size_t kvol = conv.weight.data.size() / static_cast<size_t>(conv.out_ch);
    for (int o = 0; o < conv.out_ch; ++o) {
      double scale = l.bn_gamma.data[static_cast<size_t>(o)] /
                     std::sqrt(l.bn_var.data[static_cast<size_t>(o)] + l.bn_eps);
      for (size_t j = 0; j < kvol; ++j) conv.weight.data[static_cast<size_t>(o) * kvol + j] *= scale;
      conv.bias.data[static_cast<size_t>(o)] =
          (conv.bias.data[static_cast<size_t>(o)] - l.bn_mean.data[static_cast<size_t>(o)]) * scale +
          l.bn_beta.data[static_cast<size_t>(o)];
    }
    remap[i] = static_cast<int>(out.size()) - 1;  // BN output == folded conv output
  }
  for (Layer& l : out)
    if (l.kind == LayerKind::Add) l.skip_from = remap[static_cast<size_t>(l.skip_from)];
  m.layers = std::move(out);
  m.validate();
  return m;
}

double mean_relative_error(const Tensor& a, const Tensor& ref, double eps) {
  if (a.data.size() != ref.data.size()) throw ConfigError("mean_relative_error size mismatch");
  if (a.data.empty()) return 0.0;
  double acc = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    acc += std::abs(a.data[i] - ref.data[i]) / (std::abs(ref.data[i]) + eps);
  return acc / static_cast<double>(a.data.size());
}

}  // namespace axmul
