#pragma once

#include <limits>
#include <vector>

#include "sshield/layers.hpp"
#include "sshield/tensor.hpp"

namespace sshield {

// Post-training 8-bit quantization. Weights: per-tensor symmetric int8,
// snapped onto their grid at quantize time. Activations: per-site asymmetric
// uint8, ranges from min/max calibration, applied as quantize-dequantize
// nodes during fake-quant forward passes.

struct QuantizedTensor {
  Tensor q;        // integer codes stored as floats (int8/uint8 fits exactly)
  Tensor dequant;  // scale * (q - zero_point)
};

// Symmetric int8 grid sized to max|w|. All-zero tensors get scale 1.
QuantParams weight_qparams(const Tensor& w);

// Asymmetric uint8 grid for an observed activation range. The range is
// nudged to include zero (so q == zero_point is exactly 0.0) and the scale
// chosen so [real_min, real_max] covers the observed extrema.
QuantParams activation_qparams(float observed_min, float observed_max);

QuantizedTensor quantize_tensor(const Tensor& x, const QuantParams& qp);
// Quantize-dequantize in one step.
Tensor fake_quant(const Tensor& x, const QuantParams& qp);

struct SiteRange {
  float min = std::numeric_limits<float>::infinity();
  float max = -std::numeric_limits<float>::infinity();
};

// Observed activation extrema, keyed by layer index of the BN-folded graph
// plus one entry for the network input. Default-constructed stats are the
// merge identity.
struct CalibrationStats {
  SiteRange input;
  std::vector<SiteRange> layer;
  int n_batches = 0;
};

CalibrationStats merge_stats(const CalibrationStats& a, const CalibrationStats& b);

// Absorbs every BatchNorm into the conv/dwconv/dense directly before it
// (w' = w*g/sqrt(rv+eps), b' = (b-rm)*g/sqrt(rv+eps)+beta) and remaps Add
// skip indices. BatchNorms without such a predecessor are kept.
ModelGraph fold_batchnorm(const ModelGraph& m);

// True for each folded layer whose output gets its own uint8 grid. A layer
// feeding directly into ReLU or BatchNorm defers to that consumer's site;
// shape-only layers (pool, flatten, dropout) reuse their input's grid and
// the softmax head stays float.
std::vector<bool> activation_sites(const ModelGraph& folded);

// Runs the float model over `data` ([N,H,W,C]) in deterministic mode and
// records per-site extrema. Throws on an empty set or a quantized model.
CalibrationStats calibrate_activation_ranges(const ModelGraph& m, const Tensor& data,
                                             int batch_size = 64);

// Folds BatchNorm, snaps weights onto symmetric int8 grids and attaches
// activation qparams at every site. Quantizing the result again with the
// same stats is a bit-exact no-op: stored weight grids are reused rather
// than re-derived, and the activation grids are a pure function of stats.
ModelGraph quantize_model(const ModelGraph& m, const CalibrationStats& stats);

}  // namespace sshield
