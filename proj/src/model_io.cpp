#include "sshield/model_io.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace sshield {
namespace {

// Payloads are raw IEEE floats in host order; every platform we build for is
// little-endian, which is what the format mandates.

constexpr char kMagic[4] = {'S', 'S', 'H', 'M'};
constexpr uint32_t kDtypeF32 = 0;

struct Writer {
  std::vector<char> out;

  void bytes(const void* p, size_t n) {
    const char* c = static_cast<const char*>(p);
    out.insert(out.end(), c, c + n);
  }
  void u8(uint8_t v) { bytes(&v, 1); }
  void u32(uint32_t v) { bytes(&v, 4); }
  void u64(uint64_t v) { bytes(&v, 8); }
  void i32(int32_t v) { bytes(&v, 4); }
  void f32(float v) { bytes(&v, 4); }
  void str(const std::string& s) {
    u32(uint32_t(s.size()));
    bytes(s.data(), s.size());
  }
  void qp_opt(const std::optional<QuantParams>& qp) {
    u8(qp.has_value() ? 1 : 0);
    if (qp) {
      f32(qp->scale);
      i32(qp->zero_point);
      u8(qp->symmetric ? 1 : 0);
      i32(qp->bits);
    }
  }
};

struct Reader {
  const std::vector<char>& buf;
  const std::string& path;
  size_t pos = 0;

  void bytes(void* p, size_t n) {
    if (n > buf.size() - pos)
      throw std::runtime_error("corrupt model container (truncated): " + path);
    std::memcpy(p, buf.data() + pos, n);
    pos += n;
  }
  uint8_t u8() { uint8_t v; bytes(&v, 1); return v; }
  uint32_t u32() { uint32_t v; bytes(&v, 4); return v; }
  uint64_t u64() { uint64_t v; bytes(&v, 8); return v; }
  int32_t i32() { int32_t v; bytes(&v, 4); return v; }
  float f32() { float v; bytes(&v, 4); return v; }
  std::string str() {
    uint32_t n = u32();
    if (n > buf.size() - pos)
      throw std::runtime_error("corrupt model container (truncated): " + path);
    std::string s(buf.data() + pos, n);
    pos += n;
    return s;
  }
  std::optional<QuantParams> qp_opt() {
    if (u8() == 0) return std::nullopt;
    QuantParams qp;
    qp.scale = f32();
    qp.zero_point = i32();
    qp.symmetric = u8() != 0;
    qp.bits = i32();
    return qp;
  }
};

struct NamedTensor {
  std::string name;
  const Tensor* t;
};

std::vector<NamedTensor> tensor_directory(const ModelGraph& m) {
  std::vector<NamedTensor> dir;
  for (size_t i = 0; i < m.layers.size(); ++i) {
    const Layer& l = m.layers[i];
    std::string prefix = "L" + std::to_string(i) + ".";
    auto add = [&](const char* field, const Tensor& t) {
      if (!t.empty()) dir.push_back({prefix + field, &t});
    };
    add("weights", l.weights);
    add("bias", l.bias);
    add("gamma", l.gamma);
    add("beta", l.beta);
    add("running_mean", l.running_mean);
    add("running_var", l.running_var);
  }
  return dir;
}

// Resolves "L<i>.<field>" against the rebuilt layer list.
Tensor* tensor_slot(ModelGraph& m, const std::string& name, const std::string& path) {
  auto bad = [&](const std::string& why) {
    return std::runtime_error("model tensor " + name + " in " + path + ": " + why);
  };
  size_t dot = name.find('.');
  if (name.size() < 4 || name[0] != 'L' || dot == std::string::npos || dot < 2)
    throw bad("unrecognized name");
  std::string digits = name.substr(1, dot - 1);
  if (digits.find_first_not_of("0123456789") != std::string::npos) throw bad("unrecognized name");
  size_t idx = 0;
  try {
    idx = std::stoul(digits);
  } catch (const std::exception&) {
    throw bad("unrecognized name");
  }
  if (idx >= m.layers.size()) throw bad("layer index out of range");
  Layer& l = m.layers[idx];
  std::string field = name.substr(dot + 1);
  if (field == "weights" && l.has_weights()) return &l.weights;
  if (field == "bias" && l.has_weights()) return &l.bias;
  if (l.has_bn_params()) {
    if (field == "gamma") return &l.gamma;
    if (field == "beta") return &l.beta;
    if (field == "running_mean") return &l.running_mean;
    if (field == "running_var") return &l.running_var;
  }
  throw bad("field does not belong to a " + std::string(layer_kind_name(l.kind)) + " layer");
}

}  // namespace

void save_model(const ModelGraph& m, const std::string& path) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kModelFormatVersion);

  w.str(m.arch);
  w.i32(m.input.h);
  w.i32(m.input.w);
  w.i32(m.input.c);
  w.i32(m.n_classes);
  w.u8(m.quantized ? 1 : 0);
  w.qp_opt(m.input_qp);

  w.u32(uint32_t(m.layers.size()));
  for (const Layer& l : m.layers) {
    w.u8(uint8_t(l.kind));
    w.i32(l.kernel_h);
    w.i32(l.kernel_w);
    w.i32(l.stride);
    w.u8(uint8_t(l.padding));
    w.f32(l.rate);
    w.i32(l.skip_src);
    w.qp_opt(l.weight_qp);
    w.qp_opt(l.out_qp);
  }

  std::vector<NamedTensor> dir = tensor_directory(m);

  // Directory size depends only on names and ranks, so payload offsets can be
  // computed before anything is written.
  size_t dir_bytes = 4;
  for (const NamedTensor& e : dir)
    dir_bytes += 4 + e.name.size() + 4 + 4 + 4 * size_t(e.t->rank()) + 8 + 8;
  uint64_t offset = w.out.size() + dir_bytes;

  w.u32(uint32_t(dir.size()));
  for (const NamedTensor& e : dir) {
    w.str(e.name);
    w.u32(kDtypeF32);
    w.u32(uint32_t(e.t->rank()));
    for (int d = 0; d < e.t->rank(); ++d) w.i32(e.t->dim(d));
    uint64_t nbytes = uint64_t(e.t->numel()) * sizeof(float);
    w.u64(offset);
    w.u64(nbytes);
    offset += nbytes;
  }
  for (const NamedTensor& e : dir) w.bytes(e.t->data(), size_t(e.t->numel()) * sizeof(float));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(w.out.data(), std::streamsize(w.out.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

ModelGraph load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r{buf, path};

  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("not a model file (bad magic): " + path);
  uint32_t version = r.u32();
  if (version != kModelFormatVersion)
    throw std::runtime_error("model format version " + std::to_string(version) +
                             " in " + path + " is not supported; this build reads version " +
                             std::to_string(kModelFormatVersion));

  ModelGraph m;
  m.arch = r.str();
  m.input.h = r.i32();
  m.input.w = r.i32();
  m.input.c = r.i32();
  m.n_classes = r.i32();
  m.quantized = r.u8() != 0;
  m.input_qp = r.qp_opt();

  uint32_t n_layers = r.u32();
  m.layers.reserve(n_layers);
  for (uint32_t i = 0; i < n_layers; ++i) {
    Layer l;
    uint8_t kind = r.u8();
    if (kind > uint8_t(LayerKind::Add))
      throw std::runtime_error("corrupt model container (unknown layer kind " +
                               std::to_string(kind) + "): " + path);
    l.kind = LayerKind(kind);
    l.kernel_h = r.i32();
    l.kernel_w = r.i32();
    l.stride = r.i32();
    uint8_t pad = r.u8();
    if (pad > uint8_t(Padding::Same))
      throw std::runtime_error("corrupt model container (bad padding code): " + path);
    l.padding = Padding(pad);
    l.rate = r.f32();
    l.skip_src = r.i32();
    l.weight_qp = r.qp_opt();
    l.out_qp = r.qp_opt();
    m.layers.push_back(std::move(l));
  }

  uint32_t n_tensors = r.u32();
  for (uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.str();
    uint32_t dtype = r.u32();
    if (dtype != kDtypeF32)
      throw std::runtime_error("model tensor " + name + " in " + path +
                               ": unsupported dtype code " + std::to_string(dtype));
    uint32_t rank = r.u32();
    if (rank > 8)
      throw std::runtime_error("corrupt model container (tensor rank " +
                               std::to_string(rank) + "): " + path);
    std::vector<int> dims(rank);
    int64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      dims[d] = r.i32();
      if (dims[d] <= 0)
        throw std::runtime_error("corrupt model container (bad dimension): " + path);
      numel *= dims[d];
    }
    uint64_t offset = r.u64();
    uint64_t nbytes = r.u64();
    if (nbytes != uint64_t(numel) * sizeof(float))
      throw std::runtime_error("model tensor " + name + " in " + path +
                               ": payload size does not match dims");
    if (offset > buf.size() || nbytes > buf.size() - offset)
      throw std::runtime_error("corrupt model container (truncated): " + path);

    Tensor* slot = tensor_slot(m, name, path);
    *slot = Tensor(std::move(dims));
    std::memcpy(slot->data(), buf.data() + offset, nbytes);
  }

  try {
    validate_model(m);
  } catch (const std::exception& e) {
    throw std::runtime_error("model in " + path + " is inconsistent: " + e.what());
  }
  return m;
}

void save_tensor(const Tensor& t, const std::string& path) {
  Writer w;
  w.bytes("SSHT", 4);
  w.u32(kModelFormatVersion);
  w.u32(uint32_t(t.rank()));
  for (int d = 0; d < t.rank(); ++d) w.i32(t.dim(d));
  w.bytes(t.data(), size_t(t.numel()) * sizeof(float));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(w.out.data(), std::streamsize(w.out.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r{buf, path};

  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "SSHT", 4) != 0)
    throw std::runtime_error("not a tensor file (bad magic): " + path);
  uint32_t version = r.u32();
  if (version != kModelFormatVersion)
    throw std::runtime_error("tensor format version " + std::to_string(version) +
                             " in " + path + " is not supported; this build reads version " +
                             std::to_string(kModelFormatVersion));
  uint32_t rank = r.u32();
  if (rank > 8)
    throw std::runtime_error("corrupt model container (tensor rank " + std::to_string(rank) +
                             "): " + path);
  std::vector<int> dims(rank);
  int64_t numel = 1;
  for (uint32_t d = 0; d < rank; ++d) {
    dims[d] = r.i32();
    if (dims[d] <= 0) throw std::runtime_error("corrupt model container (bad dimension): " + path);
    numel *= dims[d];
  }
  Tensor t(std::move(dims));
  r.bytes(t.data(), size_t(numel) * sizeof(float));
  if (r.pos != buf.size())
    throw std::runtime_error("corrupt model container (trailing bytes): " + path);
  return t;
}

}  // namespace sshield
