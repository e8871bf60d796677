#include "axmul/arch.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "axmul/errors.hpp"
#include "axmul/rng.hpp"

namespace axmul {
namespace {

void check_input(int in_ch, int in_h, int in_w, int n_classes) {
  if (in_ch <= 0 || in_h <= 0 || in_w <= 0 || n_classes <= 1)
    throw ConfigError("architecture needs positive input dims and at least 2 classes");
  if (in_h % 4 != 0 || in_w % 4 != 0)
    throw ConfigError("architecture pools twice by 2; input sides must be multiples of 4");
}

Tensor slice_samples(const Tensor& t, int begin, int end) {
  std::vector<int> shape = t.shape;
  shape[0] = end - begin;
  const size_t per = static_cast<size_t>(t.numel() / t.dim(0));
  Tensor out(std::move(shape));
  std::copy_n(t.data.begin() + static_cast<int64_t>(begin) * static_cast<int64_t>(per),
              static_cast<size_t>(end - begin) * per, out.data.begin());
  return out;
}

}  // namespace

std::vector<std::string> arch_names() { return {"lenet-small", "toy-resnet"}; }

ModelGraph make_arch(const std::string& name, int in_ch, int in_h, int in_w, int n_classes) {
  if (name == "lenet-small") return make_lenet_small(in_ch, in_h, in_w, n_classes);
  if (name == "toy-resnet") return make_toy_resnet(in_ch, in_h, in_w, n_classes);
  std::string known;
  for (const std::string& n : arch_names()) known += (known.empty() ? "" : ", ") + n;
  throw ConfigError("unknown architecture '" + name + "' (" + known + ")");
}

ModelGraph make_lenet_small(int in_ch, int in_h, int in_w, int n_classes) {
  check_input(in_ch, in_h, in_w, n_classes);
  ModelGraph m;
  m.in_ch = in_ch;
  m.in_h = in_h;
  m.in_w = in_w;
  m.n_classes = n_classes;
  m.layers.push_back(make_conv(in_ch, 8, 3, 1, 1));
  m.layers.push_back(make_relu());
  m.layers.push_back(make_maxpool(2, 2));
  m.layers.push_back(make_conv(8, 16, 3, 1, 1));
  m.layers.push_back(make_relu());
  m.layers.push_back(make_maxpool(2, 2));
  m.layers.push_back(make_flatten());
  m.layers.push_back(make_linear(16 * (in_h / 4) * (in_w / 4), n_classes));
  m.validate();
  return m;
}

ModelGraph make_toy_resnet(int in_ch, int in_h, int in_w, int n_classes) {
  check_input(in_ch, in_h, in_w, n_classes);
  ModelGraph m;
  m.in_ch = in_ch;
  m.in_h = in_h;
  m.in_w = in_w;
  m.n_classes = n_classes;
  m.layers.push_back(make_conv(in_ch, 8, 3, 1, 1));  // 0
  m.layers.push_back(make_batchnorm(8));             // 1
  m.layers.push_back(make_relu());                   // 2: residual source
  m.layers.push_back(make_conv(8, 8, 3, 1, 1));      // 3
  m.layers.push_back(make_batchnorm(8));             // 4
  m.layers.push_back(make_add(2));                   // 5
  m.layers.push_back(make_relu());                   // 6
  m.layers.push_back(make_maxpool(2, 2));            // 7
  m.layers.push_back(make_conv(8, 16, 3, 1, 1));     // 8
  m.layers.push_back(make_batchnorm(16));            // 9
  m.layers.push_back(make_relu());                   // 10
  m.layers.push_back(make_maxpool(2, 2));            // 11
  m.layers.push_back(make_flatten());                // 12
  m.layers.push_back(make_linear(16 * (in_h / 4) * (in_w / 4), n_classes));
  m.validate();
  return m;
}

void init_he(ModelGraph& m, uint64_t seed) {
  Rng rng(seed);
  for (Layer& l : m.layers) {
    if (l.kind == LayerKind::BatchNorm) {
      std::fill(l.bn_gamma.data.begin(), l.bn_gamma.data.end(), 1.0);
      std::fill(l.bn_beta.data.begin(), l.bn_beta.data.end(), 0.0);
      std::fill(l.bn_mean.data.begin(), l.bn_mean.data.end(), 0.0);
      std::fill(l.bn_var.data.begin(), l.bn_var.data.end(), 1.0);
      continue;
    }
    if (!l.multiplicative()) continue;
    const double fan_in = static_cast<double>(l.weight.data.size()) / l.out_ch;
    const double scale = std::sqrt(2.0 / fan_in);
    for (double& v : l.weight.data) v = rng.normal() * scale;
    std::fill(l.bias.data.begin(), l.bias.data.end(), 0.0);
  }
}

void set_batchnorm_stats(ModelGraph& m, const Tensor& batch) {
  bool any = false;
  for (const Layer& l : m.layers) any = any || l.kind == LayerKind::BatchNorm;
  if (!any) return;

  ForwardOptions fo;
  fo.retain_trace = true;
  const ForwardTrace tr = forward(m, batch, fo);
  for (size_t li = 0; li < m.layers.size(); ++li) {
    Layer& l = m.layers[li];
    if (l.kind != LayerKind::BatchNorm) continue;
    const Tensor& x = input_of(tr, static_cast<int>(li));
    const int n = x.dim(0), c = x.dim(1);
    const size_t plane = static_cast<size_t>(x.dim(2)) * x.dim(3);
    const double inv = 1.0 / (static_cast<double>(n) * plane);
    for (int ch = 0; ch < c; ++ch) {
      double mean = 0.0;
      for (int s = 0; s < n; ++s) {
        const double* p = x.data.data() + (static_cast<size_t>(s) * c + ch) * plane;
        for (size_t i = 0; i < plane; ++i) mean += p[i];
      }
      mean *= inv;
      double var = 0.0;
      for (int s = 0; s < n; ++s) {
        const double* p = x.data.data() + (static_cast<size_t>(s) * c + ch) * plane;
        for (size_t i = 0; i < plane; ++i) var += (p[i] - mean) * (p[i] - mean);
      }
      var *= inv;
      l.bn_mean.data[static_cast<size_t>(ch)] = mean;
      l.bn_var.data[static_cast<size_t>(ch)] = var;
    }
  }
}

TrainStats train_float(ModelGraph& m, const Dataset& data, const TrainOptions& opts) {
  m.validate();
  if (data.count() == 0) throw ConfigError("training set is empty");
  if (opts.epochs < 0 || opts.batch <= 0 || opts.lr <= 0.0 || opts.momentum < 0.0 ||
      opts.momentum >= 1.0)
    throw ConfigError("invalid training options");
  if (data.images.dim(1) != m.in_ch || data.images.dim(2) != m.in_h || data.images.dim(3) != m.in_w)
    throw ConfigError("dataset shape does not match model input");

  std::vector<Tensor> vel_w(m.layers.size()), vel_b(m.layers.size());
  for (size_t i = 0; i < m.layers.size(); ++i) {
    if (!m.layers[i].multiplicative()) continue;
    vel_w[i] = Tensor(m.layers[i].weight.shape);
    vel_b[i] = Tensor(m.layers[i].bias.shape);
  }

  Rng rng(opts.seed);
  std::vector<int> order(static_cast<size_t>(data.count()));
  std::iota(order.begin(), order.end(), 0);

  TrainStats stats;
  ForwardOptions fo;
  fo.retain_trace = true;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (int begin = 0; begin < data.count(); begin += opts.batch) {
      const int end = std::min(begin + opts.batch, data.count());
      const std::vector<int> idx(order.begin() + begin, order.begin() + end);
      const Dataset mb = take(data, idx);

      const ForwardTrace tr = forward(m, mb.images, fo);
      const LossResult lr = loss_ce(tr.logits, mb.labels);
      const Tensor d_logits = loss_ce_backward(lr.probs, mb.labels);
      const BackwardResult bw = backward(m, tr, d_logits, fo, true);
      loss_sum += lr.loss * (end - begin);

      for (size_t li = 0; li < m.layers.size(); ++li) {
        Layer& l = m.layers[li];
        if (!l.multiplicative()) continue;
        for (size_t i = 0; i < l.weight.data.size(); ++i) {
          double& v = vel_w[li].data[i];
          v = opts.momentum * v - opts.lr * bw.d_w[li].data[i];
          l.weight.data[i] += v;
        }
        for (size_t i = 0; i < l.bias.data.size(); ++i) {
          double& v = vel_b[li].data[i];
          v = opts.momentum * v - opts.lr * bw.d_b[li].data[i];
          l.bias.data[i] += v;
        }
      }
    }
    stats.epoch_loss.push_back(loss_sum / data.count());
  }
  return stats;
}

double evaluate_accuracy(const ModelGraph& m, const Dataset& d, const ForwardOptions& base,
                         int chunk) {
  if (d.count() == 0) throw ConfigError("evaluation set is empty");
  if (chunk <= 0) throw ConfigError("evaluation chunk must be > 0");
  ForwardOptions fo = base;
  fo.retain_trace = false;
  int64_t correct = 0;
  for (int begin = 0; begin < d.count(); begin += chunk) {
    const int end = std::min(begin + chunk, d.count());
    const Tensor batch = slice_samples(d.images, begin, end);
    const ForwardTrace tr = forward(m, batch, fo);
    const int k = tr.logits.dim(1);
    for (int s = 0; s < end - begin; ++s) {
      const double* row = tr.logits.data.data() + static_cast<size_t>(s) * k;
      int best = 0;
      for (int j = 1; j < k; ++j)
        if (row[j] > row[best]) best = j;
      if (best == d.labels[static_cast<size_t>(begin + s)]) ++correct;
    }
  }
  return 100.0 * static_cast<double>(correct) / d.count();
}

}  // namespace axmul
