#pragma once

#include <cstdint>
#include <vector>

namespace axmul {

// Dense row-major tensor of doubles. Activations use NCHW order.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(static_cast<size_t>(count(shape)), 0.0) {}
  Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {}

  static int64_t count(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

// Integer companion (quantized codes, pooling argmax indices).
struct IntTensor {
  std::vector<int> shape;
  std::vector<int32_t> data;

  IntTensor() = default;
  explicit IntTensor(std::vector<int> s) : shape(std::move(s)), data(static_cast<size_t>(Tensor::count(shape)), 0) {}

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
};

}  // namespace axmul
