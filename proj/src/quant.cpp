#include "axmul/quant.hpp"

#include <algorithm>
#include <cmath>

#include "axmul/errors.hpp"

namespace axmul {

double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw ConfigError("quantile of empty value set");
  if (q <= 0.0) return sorted.front();
  if (q >= 1.0) return sorted.back();
  double rank = q * static_cast<double>(sorted.size() - 1);
  size_t lo = static_cast<size_t>(rank);
  double frac = rank - static_cast<double>(lo);
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ConfigError("quantile of empty value set");
  std::sort(values.begin(), values.end());
  return quantile_sorted(values, q);
}

QuantParams make_params(double clip_lo, double clip_hi, int bits) {
  if (bits < 2 || bits > 8) throw ConfigError("quantization bitwidth must be in [2, 8]");
  QuantParams p;
  p.bits = bits;
  p.b = clip_lo;
  p.clip_lo = clip_lo;
  if (clip_hi > clip_lo) {
    p.s = (clip_hi - clip_lo) / static_cast<double>(p.max_code());
    p.clip_hi = clip_hi;  // keep the fitted bound exact, not b + s*max_code
  } else {
    p.s = 1.0;  // degenerate constant range
    p.clip_hi = p.b + static_cast<double>(p.max_code());
  }
  return p;
}

QuantParams fit_params(std::span<const double> values, int bits, double q) {
  if (values.empty()) throw ConfigError("fit_params on empty tensor");
  if (q < 0.0 || q >= 0.5) throw ConfigError("quantile q must satisfy 0 <= q < 0.5");
  double lo, hi;
  if (q == 0.0) {
    lo = *std::min_element(values.begin(), values.end());
    hi = *std::max_element(values.begin(), values.end());
  } else {
    std::vector<double> v(values.begin(), values.end());
    lo = quantile(v, q);
    hi = quantile(std::move(v), 1.0 - q);
  }
  return make_params(lo, hi, bits);
}

int32_t quantize_value(double v, const QuantParams& p) {
  double c = std::round((v - p.b) / p.s);
  if (c < 0.0) return 0;
  double mc = static_cast<double>(p.max_code());
  if (c > mc) return p.max_code();
  return static_cast<int32_t>(c);
}

QuantTensor quantize(const Tensor& t, const QuantParams& p, std::vector<uint8_t>* in_range) {
  QuantTensor qt;
  qt.params = p;
  qt.codes.shape = t.shape;
  qt.codes.data.resize(t.data.size());
  if (in_range) in_range->resize(t.data.size());
  for (size_t i = 0; i < t.data.size(); ++i) {
    qt.codes.data[i] = quantize_value(t.data[i], p);
    if (in_range) (*in_range)[i] = p.in_range(t.data[i]) ? 1 : 0;
  }
  return qt;
}

Tensor dequantize(const QuantTensor& qt) {
  Tensor out(qt.codes.shape);
  for (size_t i = 0; i < qt.codes.data.size(); ++i)
    out.data[i] = dequantize_value(qt.codes.data[i], qt.params);
  return out;
}

int32_t zero_code(const QuantParams& p) { return quantize_value(0.0, p); }

}  // namespace axmul
