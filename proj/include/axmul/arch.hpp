#pragma once

#include <string>
#include <vector>

#include "axmul/dataset.hpp"
#include "axmul/net.hpp"

namespace axmul {

// Bundled desk-scale architectures.
//   lenet-small: conv(3x3,8) relu pool2 conv(3x3,16) relu pool2 flatten linear
//   toy-resnet:  one residual block (conv-bn-relu-conv-bn-add-relu) then the
//                lenet-small tail; batch norm folds away at preparation.
std::vector<std::string> arch_names();
ModelGraph make_arch(const std::string& name, int in_ch, int in_h, int in_w, int n_classes);

ModelGraph make_lenet_small(int in_ch, int in_h, int in_w, int n_classes);
ModelGraph make_toy_resnet(int in_ch, int in_h, int in_w, int n_classes);

// He-normal weights, zero biases, identity batch-norm state.
void init_he(ModelGraph& m, uint64_t seed);

// Freezes batch-norm statistics to the per-channel mean/variance observed on
// one float-path batch; a no-op for models without batch norm. Training and
// inference then share the same fixed affine, so folding is exact.
void set_batchnorm_stats(ModelGraph& m, const Tensor& batch);

struct TrainOptions {
  int epochs = 3;
  double lr = 0.05;
  double momentum = 0.9;
  int batch = 64;
  uint64_t seed = 1;
};

struct TrainStats {
  std::vector<double> epoch_loss;  // sample-weighted mean per epoch
};

// Plain SGD with momentum on the float path (conv/linear weights and biases;
// batch-norm state stays frozen). Deterministic under the seed.
TrainStats train_float(ModelGraph& m, const Dataset& data, const TrainOptions& opts);

// Top-1 accuracy in percent, evaluated in fixed-size chunks. `base` supplies
// the execution mode (float, or quantized via assignment + library).
double evaluate_accuracy(const ModelGraph& m, const Dataset& d, const ForwardOptions& base,
                         int chunk = 256);

}  // namespace axmul
