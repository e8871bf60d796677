#include "axmul/model_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "axmul/errors.hpp"

namespace axmul {
namespace {

constexpr char kMagic[8] = {'A', 'X', 'M', 'O', 'D', 'E', 'L', '\0'};

uint64_t fnv1a64(const uint8_t* data, size_t n) {
  uint64_t h = 14695981039346656037ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 1099511628211ull;
  }
  return h;
}

struct Writer {
  std::vector<uint8_t> buf;

  void bytes(const void* p, size_t n) {
    const uint8_t* b = static_cast<const uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }
  void u8(uint8_t v) { buf.push_back(v); }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void i32(int32_t v) { u32(static_cast<uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<uint64_t>(v)); }

  void quant(const QuantParams& q) {
    f64(q.s);
    f64(q.b);
    i32(q.bits);
    f64(q.clip_lo);
    f64(q.clip_hi);
  }
  void blob(const Tensor& t) {
    u8(static_cast<uint8_t>(t.shape.size()));
    for (int d : t.shape) i32(d);
    u64(t.data.size());
    for (double v : t.data) f32(static_cast<float>(v));
  }
};

struct Reader {
  const std::vector<uint8_t>& buf;
  size_t pos = 0;
  const std::string& path;

  void need(size_t n, const char* what) {
    if (pos + n > buf.size())
      throw DataError(path + ": truncated at byte " + std::to_string(buf.size()) + " reading " +
                      what);
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return buf[pos++];
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t{buf[pos + static_cast<size_t>(i)]} << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t{buf[pos + static_cast<size_t>(i)]} << (8 * i);
    pos += 8;
    return v;
  }
  int32_t i32(const char* what) { return static_cast<int32_t>(u32(what)); }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }

  QuantParams quant(const char* what) {
    QuantParams q;
    q.s = f64(what);
    q.b = f64(what);
    q.bits = i32(what);
    q.clip_lo = f64(what);
    q.clip_hi = f64(what);
    return q;
  }
  Tensor blob(const std::string& owner) {
    const int ndim = u8("blob rank");
    std::vector<int> shape(static_cast<size_t>(ndim));
    int64_t implied = 1;
    for (int& d : shape) {
      d = i32("blob shape");
      implied *= d;
    }
    const uint64_t count = u64("blob length");
    if (ndim == 0 && count == 0) return Tensor{};
    if (implied < 0 || count != static_cast<uint64_t>(implied))
      throw DataError(path + ": " + owner + ": declared " + std::to_string(count) +
                      " elements, shape implies " + std::to_string(implied));
    Tensor t;
    t.shape = std::move(shape);
    t.data.resize(count);
    for (double& v : t.data) v = f32("blob data");
    return t;
  }
};

}  // namespace

void write_model(const ModelGraph& m, const std::string& path) {
  m.validate();
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kModelFormatVersion);
  w.i32(m.in_ch);
  w.i32(m.in_h);
  w.i32(m.in_w);
  w.i32(m.n_classes);
  w.i32(static_cast<int32_t>(m.layers.size()));
  for (const Layer& l : m.layers) {
    w.u8(static_cast<uint8_t>(l.kind));
    w.i32(l.in_ch);
    w.i32(l.out_ch);
    w.i32(l.kh);
    w.i32(l.kw);
    w.i32(l.stride);
    w.i32(l.pad);
    w.i32(l.skip_from);
    w.i32(l.bits);
    w.u8(l.prepared ? 1 : 0);
    w.u8(l.calibrated ? 1 : 0);
    w.f64(l.bn_eps);
    w.f64(l.clip_gamma);
    w.f64(l.clip_beta);
    w.f64(l.q_star);
    w.quant(l.qx);
    w.quant(l.qw);
    w.blob(l.weight);
    w.blob(l.bias);
    w.blob(l.bn_gamma);
    w.blob(l.bn_beta);
    w.blob(l.bn_mean);
    w.blob(l.bn_var);
  }
  w.u64(fnv1a64(w.buf.data(), w.buf.size()));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(w.buf.data()), static_cast<std::streamsize>(w.buf.size()));
  if (!out) throw DataError("write failed for '" + path + "'");
}

ModelGraph read_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open model '" + path + "'");
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw DataError("read failed for '" + path + "'");

  if (buf.size() < sizeof kMagic + 4 + 8)
    throw DataError(path + ": truncated at byte " + std::to_string(buf.size()) +
                    ": too small for a model file");
  if (std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0)
    throw DataError(path + ": not a model file (bad magic)");

  uint64_t stored = 0;
  for (int i = 0; i < 8; ++i)
    stored |= uint64_t{buf[buf.size() - 8 + static_cast<size_t>(i)]} << (8 * i);
  if (fnv1a64(buf.data(), buf.size() - 8) != stored)
    throw DataError(path + ": checksum mismatch (file corrupted)");

  Reader r{buf, sizeof kMagic, path};
  const uint32_t version = r.u32("format version");
  if (version != kModelFormatVersion)
    throw DataError(path + ": unsupported model version " + std::to_string(version) +
                    " (expected " + std::to_string(kModelFormatVersion) + ")");

  ModelGraph m;
  m.in_ch = r.i32("input channels");
  m.in_h = r.i32("input height");
  m.in_w = r.i32("input width");
  m.n_classes = r.i32("class count");
  const int n_layers = r.i32("layer count");
  if (n_layers < 0 || n_layers > 1'000'000)
    throw DataError(path + ": implausible layer count " + std::to_string(n_layers));
  m.layers.resize(static_cast<size_t>(n_layers));
  for (int i = 0; i < n_layers; ++i) {
    Layer& l = m.layers[static_cast<size_t>(i)];
    const uint8_t kind = r.u8("layer kind");
    if (kind > static_cast<uint8_t>(LayerKind::BatchNorm))
      throw DataError(path + ": layer " + std::to_string(i) + ": unknown kind " +
                      std::to_string(kind));
    l.kind = static_cast<LayerKind>(kind);
    l.in_ch = r.i32("layer dims");
    l.out_ch = r.i32("layer dims");
    l.kh = r.i32("layer dims");
    l.kw = r.i32("layer dims");
    l.stride = r.i32("layer dims");
    l.pad = r.i32("layer dims");
    l.skip_from = r.i32("layer dims");
    l.bits = r.i32("layer bits");
    l.prepared = r.u8("layer flags") != 0;
    l.calibrated = r.u8("layer flags") != 0;
    l.bn_eps = r.f64("layer scalars");
    l.clip_gamma = r.f64("layer scalars");
    l.clip_beta = r.f64("layer scalars");
    l.q_star = r.f64("layer scalars");
    l.qx = r.quant("input quantization");
    l.qw = r.quant("weight quantization");
    const std::string owner = "layer " + std::to_string(i) + " (" + layer_kind_name(l.kind) + ")";
    l.weight = r.blob(owner + " weight blob");
    l.bias = r.blob(owner + " bias blob");
    l.bn_gamma = r.blob(owner + " bn_gamma blob");
    l.bn_beta = r.blob(owner + " bn_beta blob");
    l.bn_mean = r.blob(owner + " bn_mean blob");
    l.bn_var = r.blob(owner + " bn_var blob");
  }
  if (r.pos != buf.size() - 8)
    throw DataError(path + ": trailing data after byte " + std::to_string(r.pos));
  try {
    m.validate();
  } catch (const ConfigError& e) {
    throw DataError(path + ": inconsistent model structure: " + e.what());
  }
  return m;
}

}  // namespace axmul
