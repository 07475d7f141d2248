#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sshield/tensor.hpp"

namespace sshield {

struct Dataset {
  Tensor x;  // [N,H,W,C], values in [0,1]
  std::vector<int> y;
  int n() const { return x.rank() > 0 ? x.dim(0) : 0; }
};

// IDX-format pair (big-endian headers, magic 2051/2049). Pixels byte/255.
Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path);
// Writes the same pair; pixels are rounded to bytes, so inputs should already
// live on the k/255 grid if a lossless round trip matters.
void write_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path);

// CIFAR-10 binary batches: 3073-byte records, label byte + 3072 planar RGB.
Dataset load_cifar10_binary(const std::vector<std::string>& paths);

// Deterministic 28x28 grayscale digit corpus: glyphs with random placement,
// scale, rotation, stroke intensity, blur and pixel noise, quantized onto the
// 8-bit grid like camera data. Sample i depends only on (seed, i), so any
// subset is reproducible.
Dataset synthetic_digits(int n, uint64_t seed);

Dataset subset(const Dataset& ds, int from, int count);
Dataset shuffled(const Dataset& ds, uint64_t seed);

}  // namespace sshield
