#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "axmul/rng.hpp"
#include "axmul/tensor.hpp"

namespace axmul {

// Labeled image set in normalized real form: pixels are mapped from raw
// bytes by v = (p/255 - mean[c]) / std[c] with the per-format constants below.
struct Dataset {
  Tensor images;            // [N, C, H, W]
  std::vector<int> labels;  // [N], each in [0, n_classes)
  int n_classes = 10;

  int count() const { return images.shape.empty() ? 0 : images.dim(0); }
};

inline constexpr double kMnistMean = 0.1307;
inline constexpr double kMnistStd = 0.3081;
inline constexpr std::array<double, 3> kCifarMean{0.4914, 0.4822, 0.4465};
inline constexpr std::array<double, 3> kCifarStd{0.2470, 0.2435, 0.2616};

// IDX-format pair (big-endian magics 0x00000803 / 0x00000801). Truncation,
// magic mismatch, image/label count disagreement, and out-of-range labels
// all raise DataError naming the file and byte offset.
Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path);

// One binary batch file of 3073-byte records (1 label byte + 3x1024
// channel-planar pixels, 32x32). The multi-file form concatenates batches.
Dataset load_cifar10_bin(const std::string& path);
Dataset load_cifar10_bin(const std::vector<std::string>& paths);

// Raw byte images as found in the files, before normalization.
struct RawImages {
  int n = 0, channels = 1, h = 0, w = 0;
  std::vector<uint8_t> pixels;  // [n][channels][h][w], channel-planar
  std::vector<uint8_t> labels;  // [n]
};

void write_mnist_idx(const RawImages& imgs, const std::string& images_path,
                     const std::string& labels_path);
void write_cifar10_bin(const RawImages& imgs, const std::string& path);

// Deterministic desk-scale image source: seven-segment digit glyphs with
// jittered position, stroke intensity, and background noise. Classes are the
// ten digits and appear in equal proportion; the sample order is shuffled.
RawImages make_glyph_images(int n, int channels, int h, int w, uint64_t seed);

// Standard-named splits under a directory: MNIST-format uses
// {train,t10k}-{images-idx3,labels-idx1}-ubyte, CIFAR-format uses
// data_batch_*.bin (train, sorted) and test_batch.bin.
enum class DatasetFormat { MnistIdx, Cifar10Bin };

const char* dataset_format_name(DatasetFormat f);
DatasetFormat dataset_format_from_name(const std::string& s);

Dataset load_split(DatasetFormat f, const std::string& dir, bool train);

// Writes both splits of a synthetic glyph dataset in the given on-disk
// format; 28x28 grayscale for MNIST-format, 32x32 RGB for CIFAR-format.
void write_synthetic_dataset(DatasetFormat f, const std::string& dir, int n_train, int n_test,
                             uint64_t seed);

// Relative dataset paths resolve under the AXMUL_DATA_ROOT env var when set.
std::string resolve_dataset_dir(const std::string& path);

// Row subset in index order.
Dataset take(const Dataset& d, const std::vector<int>& indices);

// Deterministic sample-without-replacement: first `want` of a seeded shuffle
// of [0, total); all of them (in order) when want >= total or want <= 0.
std::vector<int> sample_indices(int total, int want, Rng& rng);

}  // namespace axmul
