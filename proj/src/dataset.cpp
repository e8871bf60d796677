#include "axmul/dataset.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "axmul/errors.hpp"

namespace axmul {
namespace {

constexpr uint32_t kIdxImagesMagic = 0x00000803;
constexpr uint32_t kIdxLabelsMagic = 0x00000801;
constexpr size_t kCifarRecord = 3073;  // 1 label byte + 3 * 32 * 32 pixels
constexpr int kCifarSide = 32;

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw DataError("read failed for '" + path + "'");
  return buf;
}

void write_file(const std::string& path, const std::vector<uint8_t>& buf) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("write failed for '" + path + "'");
}

uint32_t read_be32(const std::vector<uint8_t>& b, size_t off) {
  return (uint32_t{b[off]} << 24) | (uint32_t{b[off + 1]} << 16) | (uint32_t{b[off + 2]} << 8) |
         uint32_t{b[off + 3]};
}

void push_be32(std::vector<uint8_t>& b, uint32_t v) {
  b.push_back(static_cast<uint8_t>(v >> 24));
  b.push_back(static_cast<uint8_t>(v >> 16));
  b.push_back(static_cast<uint8_t>(v >> 8));
  b.push_back(static_cast<uint8_t>(v));
}

std::string hex_magic(uint32_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s = "0x";
  for (int i = 7; i >= 0; --i) s += digits[(v >> (4 * i)) & 0xf];
  return s;
}

void check_size(const std::string& path, size_t have, size_t need, const char* what) {
  if (have < need)
    throw DataError(path + ": truncated " + what + ": file ends at byte " + std::to_string(have) +
                    ", expected " + std::to_string(need) + " bytes");
  if (have > need)
    throw DataError(path + ": trailing data after byte " + std::to_string(need));
}

void check_label(const std::string& path, int label, int index, int n_classes) {
  if (label < 0 || label >= n_classes)
    throw DataError(path + ": label " + std::to_string(label) + " out of range [0," +
                    std::to_string(n_classes - 1) + "] at record " + std::to_string(index));
}

}  // namespace

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  const std::vector<uint8_t> ib = read_file(images_path);
  if (ib.size() < 16)
    throw DataError(images_path + ": truncated header: file ends at byte " +
                    std::to_string(ib.size()) + ", expected 16 bytes");
  const uint32_t magic = read_be32(ib, 0);
  if (magic != kIdxImagesMagic)
    throw DataError(images_path + ": magic " + hex_magic(magic) + ", expected " +
                    hex_magic(kIdxImagesMagic));
  const int n = static_cast<int>(read_be32(ib, 4));
  const int rows = static_cast<int>(read_be32(ib, 8));
  const int cols = static_cast<int>(read_be32(ib, 12));
  if (n <= 0 || rows <= 0 || cols <= 0)
    throw DataError(images_path + ": non-positive dimensions in header");
  check_size(images_path, ib.size(),
             16 + static_cast<size_t>(n) * rows * cols, "image data");

  const std::vector<uint8_t> lb = read_file(labels_path);
  if (lb.size() < 8)
    throw DataError(labels_path + ": truncated header: file ends at byte " +
                    std::to_string(lb.size()) + ", expected 8 bytes");
  const uint32_t lmagic = read_be32(lb, 0);
  if (lmagic != kIdxLabelsMagic)
    throw DataError(labels_path + ": magic " + hex_magic(lmagic) + ", expected " +
                    hex_magic(kIdxLabelsMagic));
  const int ln = static_cast<int>(read_be32(lb, 4));
  if (ln != n)
    throw DataError(labels_path + ": " + std::to_string(ln) + " labels for " + std::to_string(n) +
                    " images in '" + images_path + "'");
  check_size(labels_path, lb.size(), 8 + static_cast<size_t>(n), "label data");

  Dataset d;
  d.images = Tensor({n, 1, rows, cols});
  d.labels.resize(static_cast<size_t>(n));
  for (size_t i = 0; i < d.images.data.size(); ++i)
    d.images.data[i] = (ib[16 + i] / 255.0 - kMnistMean) / kMnistStd;
  for (int i = 0; i < n; ++i) {
    const int label = lb[8 + static_cast<size_t>(i)];
    check_label(labels_path, label, i, d.n_classes);
    d.labels[static_cast<size_t>(i)] = label;
  }
  return d;
}

Dataset load_cifar10_bin(const std::string& path) {
  return load_cifar10_bin(std::vector<std::string>{path});
}

Dataset load_cifar10_bin(const std::vector<std::string>& paths) {
  if (paths.empty()) throw ConfigError("no cifar batch files given");
  struct Batch {
    std::string path;
    std::vector<uint8_t> bytes;
  };
  std::vector<Batch> batches;
  size_t total = 0;
  for (const std::string& p : paths) {
    Batch b{p, read_file(p)};
    if (b.bytes.empty()) throw DataError(p + ": contains no records");
    if (b.bytes.size() % kCifarRecord != 0) {
      const size_t whole = b.bytes.size() / kCifarRecord;
      throw DataError(p + ": record " + std::to_string(whole) + " truncated at byte " +
                      std::to_string(whole * kCifarRecord) + " (records are " +
                      std::to_string(kCifarRecord) + " bytes, file has " +
                      std::to_string(b.bytes.size()) + ")");
    }
    total += b.bytes.size() / kCifarRecord;
    batches.push_back(std::move(b));
  }

  Dataset d;
  const int n = static_cast<int>(total);
  const size_t plane = static_cast<size_t>(kCifarSide) * kCifarSide;
  d.images = Tensor({n, 3, kCifarSide, kCifarSide});
  d.labels.resize(static_cast<size_t>(n));
  int s = 0;
  for (const Batch& b : batches) {
    const int bn = static_cast<int>(b.bytes.size() / kCifarRecord);
    for (int r = 0; r < bn; ++r, ++s) {
      const uint8_t* rec = b.bytes.data() + static_cast<size_t>(r) * kCifarRecord;
      const int label = rec[0];
      check_label(b.path, label, r, d.n_classes);
      d.labels[static_cast<size_t>(s)] = label;
      double* out = d.images.data.data() + static_cast<size_t>(s) * 3 * plane;
      for (int c = 0; c < 3; ++c)
        for (size_t i = 0; i < plane; ++i)
          out[static_cast<size_t>(c) * plane + i] =
              (rec[1 + static_cast<size_t>(c) * plane + i] / 255.0 - kCifarMean[static_cast<size_t>(c)]) /
              kCifarStd[static_cast<size_t>(c)];
    }
  }
  return d;
}

void write_mnist_idx(const RawImages& imgs, const std::string& images_path,
                     const std::string& labels_path) {
  if (imgs.channels != 1) throw ConfigError("mnist-format images must have one channel");
  const size_t want = static_cast<size_t>(imgs.n) * imgs.h * imgs.w;
  if (imgs.pixels.size() != want || imgs.labels.size() != static_cast<size_t>(imgs.n))
    throw ConfigError("raw image buffer sizes disagree with the declared dimensions");

  std::vector<uint8_t> ib;
  ib.reserve(16 + want);
  push_be32(ib, kIdxImagesMagic);
  push_be32(ib, static_cast<uint32_t>(imgs.n));
  push_be32(ib, static_cast<uint32_t>(imgs.h));
  push_be32(ib, static_cast<uint32_t>(imgs.w));
  ib.insert(ib.end(), imgs.pixels.begin(), imgs.pixels.end());
  write_file(images_path, ib);

  std::vector<uint8_t> lb;
  lb.reserve(8 + imgs.labels.size());
  push_be32(lb, kIdxLabelsMagic);
  push_be32(lb, static_cast<uint32_t>(imgs.n));
  lb.insert(lb.end(), imgs.labels.begin(), imgs.labels.end());
  write_file(labels_path, lb);
}

void write_cifar10_bin(const RawImages& imgs, const std::string& path) {
  if (imgs.channels != 3 || imgs.h != kCifarSide || imgs.w != kCifarSide)
    throw ConfigError("cifar-format images must be 3x32x32");
  const size_t plane = static_cast<size_t>(kCifarSide) * kCifarSide;
  if (imgs.pixels.size() != static_cast<size_t>(imgs.n) * 3 * plane ||
      imgs.labels.size() != static_cast<size_t>(imgs.n))
    throw ConfigError("raw image buffer sizes disagree with the declared dimensions");

  std::vector<uint8_t> out;
  out.reserve(static_cast<size_t>(imgs.n) * kCifarRecord);
  for (int s = 0; s < imgs.n; ++s) {
    out.push_back(imgs.labels[static_cast<size_t>(s)]);
    const uint8_t* px = imgs.pixels.data() + static_cast<size_t>(s) * 3 * plane;
    out.insert(out.end(), px, px + 3 * plane);
  }
  write_file(path, out);
}

namespace {

// Seven-segment membership per digit: segments A..G in bit order 0..6.
//   A top, B top-right, C bottom-right, D bottom, E bottom-left, F top-left,
//   G middle.
constexpr std::array<uint8_t, 10> kDigitSegments{
    0b0111111,  // 0: ABCDEF
    0b0000110,  // 1: BC
    0b1011011,  // 2: ABDEG
    0b1001111,  // 3: ABCDG
    0b1100110,  // 4: BCFG
    0b1101101,  // 5: ACDFG
    0b1111101,  // 6: ACDEFG
    0b0000111,  // 7: ABC
    0b1111111,  // 8: all
    0b1101111,  // 9: ABCDFG
};

struct Rect {
  double x0, y0, x1, y1;  // glyph-box coordinates in [0,1], y down
};

std::vector<Rect> segment_rects(uint8_t mask, double t) {
  std::vector<Rect> r;
  if (mask & (1 << 0)) r.push_back({0, 0, 1, t});                          // A
  if (mask & (1 << 1)) r.push_back({1 - t, 0, 1, 0.5 + t / 2});            // B
  if (mask & (1 << 2)) r.push_back({1 - t, 0.5 - t / 2, 1, 1});            // C
  if (mask & (1 << 3)) r.push_back({0, 1 - t, 1, 1});                      // D
  if (mask & (1 << 4)) r.push_back({0, 0.5 - t / 2, t, 1});                // E
  if (mask & (1 << 5)) r.push_back({0, 0, t, 0.5 + t / 2});                // F
  if (mask & (1 << 6)) r.push_back({0, 0.5 - t / 2, 1, 0.5 + t / 2});      // G
  return r;
}

}  // namespace

RawImages make_glyph_images(int n, int channels, int h, int w, uint64_t seed) {
  if (n <= 0 || h < 8 || w < 8 || (channels != 1 && channels != 3))
    throw ConfigError("glyph images need n > 0, side >= 8, and 1 or 3 channels");
  RawImages out;
  out.n = n;
  out.channels = channels;
  out.h = h;
  out.w = w;
  const size_t plane = static_cast<size_t>(h) * w;
  out.pixels.resize(static_cast<size_t>(n) * channels * plane);
  out.labels.resize(static_cast<size_t>(n));

  Rng rng(seed);
  for (int s = 0; s < n; ++s) {
    const int digit = s % 10;
    out.labels[static_cast<size_t>(s)] = static_cast<uint8_t>(digit);

    // Glyph box: a little over half the image, jittered by up to 2 px.
    const double box_w = 0.52 * w;
    const double box_h = 0.72 * h;
    const double bx = (w - box_w) / 2 + rng.range(-2, 2);
    const double by = (h - box_h) / 2 + rng.range(-2, 2);
    const double fg = rng.uniform(170.0, 255.0);
    const double stroke = rng.uniform(0.16, 0.24);  // thickness, box units

    std::vector<double> canvas(plane);
    for (double& v : canvas) v = rng.uniform(0.0, 32.0);
    for (const Rect& r : segment_rects(kDigitSegments[static_cast<size_t>(digit)], stroke)) {
      const int px0 = std::max(0, static_cast<int>(std::floor(bx + r.x0 * box_w)));
      const int py0 = std::max(0, static_cast<int>(std::floor(by + r.y0 * box_h)));
      const int px1 = std::min(w, static_cast<int>(std::ceil(bx + r.x1 * box_w)));
      const int py1 = std::min(h, static_cast<int>(std::ceil(by + r.y1 * box_h)));
      for (int y = py0; y < py1; ++y)
        for (int x = px0; x < px1; ++x)
          canvas[static_cast<size_t>(y) * w + x] = std::max(canvas[static_cast<size_t>(y) * w + x], fg);
    }

    uint8_t* px = out.pixels.data() + static_cast<size_t>(s) * channels * plane;
    for (int c = 0; c < channels; ++c) {
      // Mild per-channel tint keeps RGB variants non-degenerate.
      const double tint = channels == 1 ? 1.0 : rng.uniform(0.75, 1.0);
      for (size_t i = 0; i < plane; ++i)
        px[static_cast<size_t>(c) * plane + i] =
            static_cast<uint8_t>(std::clamp(canvas[i] * tint, 0.0, 255.0));
    }
  }

  // Balanced by construction; shuffle so mini-batches are not class-striped.
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  RawImages shuffled = out;
  for (int s = 0; s < n; ++s) {
    const int src = order[static_cast<size_t>(s)];
    shuffled.labels[static_cast<size_t>(s)] = out.labels[static_cast<size_t>(src)];
    std::copy_n(out.pixels.begin() + static_cast<int64_t>(src) * channels * static_cast<int64_t>(plane),
                channels * plane,
                shuffled.pixels.begin() + static_cast<int64_t>(s) * channels * static_cast<int64_t>(plane));
  }
  return shuffled;
}

const char* dataset_format_name(DatasetFormat f) {
  switch (f) {
    case DatasetFormat::MnistIdx: return "mnist";
    case DatasetFormat::Cifar10Bin: return "cifar10";
  }
  return "?";
}

DatasetFormat dataset_format_from_name(const std::string& s) {
  if (s == "mnist") return DatasetFormat::MnistIdx;
  if (s == "cifar10") return DatasetFormat::Cifar10Bin;
  throw ConfigError("unknown dataset format '" + s + "' (mnist, cifar10)");
}

Dataset load_split(DatasetFormat f, const std::string& dir, bool train) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  if (f == DatasetFormat::MnistIdx) {
    const char* stem = train ? "train" : "t10k";
    return load_mnist_idx((root / (std::string(stem) + "-images-idx3-ubyte")).string(),
                          (root / (std::string(stem) + "-labels-idx1-ubyte")).string());
  }
  if (!train) return load_cifar10_bin((root / "test_batch.bin").string());
  std::vector<std::string> batches;
  std::error_code ec;
  for (const auto& e : fs::directory_iterator(root, ec)) {
    const std::string name = e.path().filename().string();
    if (name.rfind("data_batch_", 0) == 0 && name.size() > 4 &&
        name.compare(name.size() - 4, 4, ".bin") == 0)
      batches.push_back(e.path().string());
  }
  if (ec) throw DataError("cannot list dataset directory '" + dir + "': " + ec.message());
  if (batches.empty()) throw DataError("no data_batch_*.bin files under '" + dir + "'");
  std::sort(batches.begin(), batches.end());
  return load_cifar10_bin(batches);
}

void write_synthetic_dataset(DatasetFormat f, const std::string& dir, int n_train, int n_test,
                             uint64_t seed) {
  if (n_train <= 0 || n_test <= 0) throw ConfigError("split sizes must be > 0");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create dataset directory '" + dir + "': " + ec.message());
  const fs::path root(dir);

  const int channels = f == DatasetFormat::MnistIdx ? 1 : 3;
  const int side = f == DatasetFormat::MnistIdx ? 28 : 32;
  // Distinct derived seeds keep the splits disjoint draws of the same process.
  const RawImages train = make_glyph_images(n_train, channels, side, side, seed * 2 + 1);
  const RawImages test = make_glyph_images(n_test, channels, side, side, seed * 2 + 2);

  if (f == DatasetFormat::MnistIdx) {
    write_mnist_idx(train, (root / "train-images-idx3-ubyte").string(),
                    (root / "train-labels-idx1-ubyte").string());
    write_mnist_idx(test, (root / "t10k-images-idx3-ubyte").string(),
                    (root / "t10k-labels-idx1-ubyte").string());
  } else {
    write_cifar10_bin(train, (root / "data_batch_1.bin").string());
    write_cifar10_bin(test, (root / "test_batch.bin").string());
  }
}

std::string resolve_dataset_dir(const std::string& path) {
  if (path.empty() || std::filesystem::path(path).is_absolute()) return path;
  const char* root = std::getenv("AXMUL_DATA_ROOT");
  if (root == nullptr || *root == '\0') return path;
  return (std::filesystem::path(root) / path).string();
}

Dataset take(const Dataset& d, const std::vector<int>& indices) {
  if (d.count() == 0) throw ConfigError("cannot subset an empty dataset");
  std::vector<int> shape = d.images.shape;
  shape[0] = static_cast<int>(indices.size());
  const size_t per = static_cast<size_t>(d.images.numel() / d.count());
  Dataset out;
  out.n_classes = d.n_classes;
  out.images = Tensor(std::move(shape));
  out.labels.resize(indices.size());
  for (size_t i = 0; i < indices.size(); ++i) {
    const int src = indices[i];
    if (src < 0 || src >= d.count()) throw ConfigError("subset index out of range");
    std::copy_n(d.images.data.begin() + static_cast<int64_t>(src) * static_cast<int64_t>(per), per,
                out.images.data.begin() + static_cast<int64_t>(i) * static_cast<int64_t>(per));
    out.labels[i] = d.labels[static_cast<size_t>(src)];
  }
  return out;
}

std::vector<int> sample_indices(int total, int want, Rng& rng) {
  std::vector<int> idx(static_cast<size_t>(total));
  std::iota(idx.begin(), idx.end(), 0);
  if (want <= 0 || want >= total) return idx;
  rng.shuffle(idx);
  idx.resize(static_cast<size_t>(want));
  return idx;
}

}  // namespace axmul
