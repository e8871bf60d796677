#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "axmul/tensor.hpp"

namespace axmul {

// Affine uniform quantization: code = clamp(round((v - b)/s), 0, 2^bits - 1),
// value ~ s*code + b. One (s, b) pair per tensor.
struct QuantParams {
  double s = 1.0;
  double b = 0.0;
  int bits = 8;
  double clip_lo = 0.0;  // == b
  double clip_hi = 0.0;  // == b + s*(2^bits - 1)

  int max_code() const { return (1 << bits) - 1; }
  bool in_range(double v) const { return v >= clip_lo && v <= clip_hi; }
};

struct QuantTensor {
  IntTensor codes;
  QuantParams params;
};

// Sorted-order quantile with linear interpolation at rank q*(n-1).
double quantile(std::vector<double> values, double q);

// Same on an already ascending-sorted sample (no copy, no re-sort).
double quantile_sorted(std::span<const double> sorted, double q);

// Params from explicit clip range (degenerate hi == lo falls back to s = 1).
QuantParams make_params(double clip_lo, double clip_hi, int bits);

// Params from data: clip range = (q, 1-q) empirical quantiles (q = 0 means
// min/max). Constant tensors degenerate to s = 1 so every code is 0.
QuantParams fit_params(std::span<const double> values, int bits, double q);

int32_t quantize_value(double v, const QuantParams& p);
inline double dequantize_value(int32_t code, const QuantParams& p) { return p.s * code + p.b; }

// Elementwise quantize; when in_range is non-null it is resized and set to
// 1 where v lies inside [clip_lo, clip_hi] (the straight-through mask).
QuantTensor quantize(const Tensor& t, const QuantParams& p, std::vector<uint8_t>* in_range = nullptr);

Tensor dequantize(const QuantTensor& qt);

// Code whose dequantized value is closest to real 0.0 (used for padding).
int32_t zero_code(const QuantParams& p);

}  // namespace axmul
