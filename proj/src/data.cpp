#include "sshield/data.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "sshield/quant_params.hpp"
#include "sshield/rng.hpp"

namespace sshield {

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  f.seekg(0, std::ios::end);
  std::streamoff len = f.tellg();
  f.seekg(0, std::ios::beg);
  std::vector<unsigned char> buf(static_cast<size_t>(len));
  if (len > 0) f.read(reinterpret_cast<char*>(buf.data()), len);
  if (!f) throw std::runtime_error("read failed for " + path);
  return buf;
}

uint32_t be32(const unsigned char* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void put_be32(std::ofstream& f, uint32_t v) {
  unsigned char b[4] = {
      static_cast<unsigned char>(v >> 24),
      static_cast<unsigned char>(v >> 16),
      static_cast<unsigned char>(v >> 8),
      static_cast<unsigned char>(v),
  };
  f.write(reinterpret_cast<const char*>(b), 4);
}

constexpr uint32_t kIdxImagesMagic = 2051;  // 0x00000803
constexpr uint32_t kIdxLabelsMagic = 2049;  // 0x00000801

}  // namespace

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  std::vector<unsigned char> img = read_file(images_path);
  std::vector<unsigned char> lab = read_file(labels_path);
  if (img.size() < 16) throw std::runtime_error("truncated IDX image file " + images_path);
  if (lab.size() < 8) throw std::runtime_error("truncated IDX label file " + labels_path);
  if (be32(img.data()) != kIdxImagesMagic)
    throw std::runtime_error("bad IDX image magic in " + images_path + " (want 2051, got " +
                             std::to_string(be32(img.data())) + ")");
  if (be32(lab.data()) != kIdxLabelsMagic)
    throw std::runtime_error("bad IDX label magic in " + labels_path + " (want 2049, got " +
                             std::to_string(be32(lab.data())) + ")");
  uint32_t n = be32(img.data() + 4);
  uint32_t rows = be32(img.data() + 8);
  uint32_t cols = be32(img.data() + 12);
  uint32_t n_lab = be32(lab.data() + 4);
  if (n != n_lab)
    throw std::runtime_error("IDX image/label counts differ: " + std::to_string(n) + " vs " +
                             std::to_string(n_lab));
  uint64_t need = 16ull + uint64_t(n) * rows * cols;
  if (img.size() < need) throw std::runtime_error("truncated IDX image file " + images_path);
  if (lab.size() < 8ull + n) throw std::runtime_error("truncated IDX label file " + labels_path);

  Dataset ds;
  ds.x = Tensor({int(n), int(rows), int(cols), 1});
  ds.y.resize(n);
  const unsigned char* px = img.data() + 16;
  for (int64_t i = 0; i < ds.x.numel(); ++i) ds.x[i] = float(px[i]) / 255.f;
  for (uint32_t i = 0; i < n; ++i) {
    unsigned char v = lab[8 + i];
    if (v > 9) throw std::runtime_error("IDX label out of range: " + std::to_string(int(v)));
    ds.y[i] = int(v);
  }
  return ds;
}

void write_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
  if (ds.x.rank() != 4 || ds.x.dim(3) != 1)
    throw std::invalid_argument("write_idx: expected [N,H,W,1] grayscale images");
  std::ofstream fi(images_path, std::ios::binary);
  if (!fi) throw std::runtime_error("cannot open " + images_path);
  put_be32(fi, kIdxImagesMagic);
  put_be32(fi, uint32_t(ds.x.dim(0)));
  put_be32(fi, uint32_t(ds.x.dim(1)));
  put_be32(fi, uint32_t(ds.x.dim(2)));
  std::vector<unsigned char> bytes(size_t(ds.x.numel()));
  for (int64_t i = 0; i < ds.x.numel(); ++i) {
    float v = round_half_away(ds.x[i] * 255.f);
    bytes[size_t(i)] = static_cast<unsigned char>(v < 0.f ? 0.f : (v > 255.f ? 255.f : v));
  }
  fi.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!fi) throw std::runtime_error("write failed for " + images_path);

  std::ofstream fl(labels_path, std::ios::binary);
  if (!fl) throw std::runtime_error("cannot open " + labels_path);
  put_be32(fl, kIdxLabelsMagic);
  put_be32(fl, uint32_t(ds.y.size()));
  for (int v : ds.y) {
    unsigned char b = static_cast<unsigned char>(v);
    fl.write(reinterpret_cast<const char*>(&b), 1);
  }
  if (!fl) throw std::runtime_error("write failed for " + labels_path);
}

Dataset load_cifar10_binary(const std::vector<std::string>& paths) {
  if (paths.empty()) throw std::invalid_argument("load_cifar10_binary: no files given");
  constexpr int64_t kRecord = 3073;
  int64_t total = 0;
  std::vector<std::vector<unsigned char>> files;
  for (const std::string& p : paths) {
    files.push_back(read_file(p));
    if (files.back().size() % kRecord != 0)
      throw std::runtime_error("CIFAR batch size not a multiple of 3073: " + p);
    total += int64_t(files.back().size()) / kRecord;
  }
  Dataset ds;
  ds.x = Tensor({int(total), 32, 32, 3});
  ds.y.resize(size_t(total));
  int64_t s = 0;
  for (const auto& buf : files) {
    int64_t n = int64_t(buf.size()) / kRecord;
    for (int64_t r = 0; r < n; ++r, ++s) {
      const unsigned char* rec = buf.data() + r * kRecord;
      if (rec[0] > 9) throw std::runtime_error("CIFAR label out of range: " + std::to_string(rec[0]));
      ds.y[size_t(s)] = rec[0];
      float* out = ds.x.data() + s * 32 * 32 * 3;
      for (int c = 0; c < 3; ++c) {
        const unsigned char* plane = rec + 1 + c * 1024;
        for (int p = 0; p < 1024; ++p) out[p * 3 + c] = float(plane[p]) / 255.f;
      }
    }
  }
  return ds;
}

namespace {

// 5x7 digit glyphs, row strings top to bottom
const char* const kGlyphs[10][7] = {
    {"01110", "10001", "10011", "10101", "11001", "10001", "01110"},
    {"00100", "01100", "00100", "00100", "00100", "00100", "01110"},
    {"01110", "10001", "00001", "00010", "00100", "01000", "11111"},
    {"11111", "00010", "00100", "00010", "00001", "10001", "01110"},
    {"00010", "00110", "01010", "10010", "11111", "00010", "00010"},
    {"11111", "10000", "11110", "00001", "00001", "10001", "01110"},
    {"00110", "01000", "10000", "11110", "10001", "10001", "01110"},
    {"11111", "00001", "00010", "00100", "01000", "01000", "01000"},
    {"01110", "10001", "10001", "01110", "10001", "10001", "01110"},
    {"01110", "10001", "10001", "01111", "00001", "00010", "01100"},
};

float glyph_bilinear(int digit, float gx, float gy) {
  // treat cell centers as sample points; outside the 5x7 box reads as 0
  auto at = [&](int cx, int cy) -> float {
    if (cx < 0 || cx >= 5 || cy < 0 || cy >= 7) return 0.f;
    return kGlyphs[digit][cy][cx] == '1' ? 1.f : 0.f;
  };
  float fx = std::floor(gx), fy = std::floor(gy);
  int x0 = int(fx), y0 = int(fy);
  float ax = gx - fx, ay = gy - fy;
  float top = at(x0, y0) * (1.f - ax) + at(x0 + 1, y0) * ax;
  float bot = at(x0, y0 + 1) * (1.f - ax) + at(x0 + 1, y0 + 1) * ax;
  return top * (1.f - ay) + bot * ay;
}

void render_digit(float* img, int digit, RandomStream& rs) {
  const int S = 28;
  float scale = rs.uniform(2.4f, 3.2f);
  float theta = rs.uniform(-0.25f, 0.25f);
  float dx = rs.uniform(-2.5f, 2.5f);
  float dy = rs.uniform(-2.5f, 2.5f);
  float fg = rs.uniform(0.65f, 1.f);
  float ct = std::cos(theta), st = std::sin(theta);
  float raw[28 * 28];
  for (int r = 0; r < S; ++r) {
    for (int c = 0; c < S; ++c) {
      float u = float(c) - 13.5f - dx;
      float v = float(r) - 13.5f - dy;
      float gx = (ct * u + st * v) / scale + 2.f;   // glyph center (2, 3)
      float gy = (-st * u + ct * v) / scale + 3.f;
      raw[r * S + c] = glyph_bilinear(digit, gx, gy) * fg;
    }
  }
  // 3x3 binomial blur softens the strokes
  float blur[28 * 28];
  auto sample = [&](int r, int c) -> float {
    if (r < 0 || r >= S || c < 0 || c >= S) return 0.f;
    return raw[r * S + c];
  };
  for (int r = 0; r < S; ++r)
    for (int c = 0; c < S; ++c) {
      float acc = 0.f;
      const float k[3] = {0.25f, 0.5f, 0.25f};
      for (int i = -1; i <= 1; ++i)
        for (int j = -1; j <= 1; ++j) acc += k[i + 1] * k[j + 1] * sample(r + i, c + j);
      blur[r * S + c] = acc;
    }
  float sigma = rs.uniform(0.02f, 0.06f);
  for (int i = 0; i < S * S; ++i) {
    float v = blur[i] + sigma * rs.normal();
    v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
    img[i] = round_half_away(v * 255.f) / 255.f;  // land on the 8-bit grid
  }
}

}  // namespace

Dataset synthetic_digits(int n, uint64_t seed) {
  if (n < 1) throw std::invalid_argument("synthetic_digits: need n >= 1");
  Dataset ds;
  ds.x = Tensor({n, 28, 28, 1});
  ds.y.resize(size_t(n));
  for (int i = 0; i < n; ++i) {
    RandomStream rs(derive_seed(seed, uint64_t(i)));
    int digit = i % 10;
    render_digit(ds.x.data() + int64_t(i) * 28 * 28, digit, rs);
    ds.y[size_t(i)] = digit;
  }
  return ds;
}

Dataset subset(const Dataset& ds, int from, int count) {
  if (from < 0 || count < 1 || from + count > ds.n())
    throw std::invalid_argument("subset: range outside dataset");
  Dataset out;
  out.x = batch_slice(ds.x, from, count);
  out.y.assign(ds.y.begin() + from, ds.y.begin() + from + count);
  return out;
}

Dataset shuffled(const Dataset& ds, uint64_t seed) {
  RandomStream rs(seed);
  std::vector<int> perm = rs.permutation(ds.n());
  Dataset out;
  out.x = Tensor(ds.x.shape());
  out.y.resize(size_t(ds.n()));
  int64_t per = ds.x.numel() / std::max(1, ds.n());
  for (int i = 0; i < ds.n(); ++i) {
    int src = perm[size_t(i)];
    std::memcpy(out.x.data() + i * per, ds.x.data() + src * per, sizeof(float) * size_t(per));
    out.y[size_t(i)] = ds.y[size_t(src)];
  }
  return out;
}

}  // namespace sshield
