#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sshield/autodiff.hpp"

namespace sshield {

// Inference-time defense: an input filter (bit-depth squeeze then median
// smoothing) applied once, then T Monte Carlo dropout passes averaged into a
// predictive distribution. Either half can be switched off to reproduce the
// ablations.
struct DefenseSpec {
  int no_bits = 5;
  int median_h = 2;
  int median_w = 2;
  int T = 5;
  uint64_t base_seed = 0;
  bool use_input_filter = true;
  bool use_mc_dropout = true;
};

// Named configurations: "vanilla" (no defense), "if" (filter only,
// deterministic), "mc5" (dropout passes only, T=5), "shield" (both).
DefenseSpec defense_preset(const std::string& name);
// Component-set label for reports: vanilla / if / mc / shield.
std::string defense_name(const DefenseSpec& spec);

struct PredictiveDistribution {
  Tensor mean;    // [N,K], rows sum to 1
  Tensor passes;  // [T,N,K] per-pass softmax rows
  std::vector<int> predicted;    // argmax of mean, lowest index on ties
  std::vector<float> confidence; // max of mean
};

// Rounds every pixel to the nearest point of the 2^b-level grid,
// half away from zero.
Tensor bit_depth_squeeze(const Tensor& x, int no_bits);

// Per-channel running-window median, window anchored top-left at each pixel
// with replicate padding past the bottom/right edges. Even windows average the
// two middle order statistics.
Tensor median_smooth(const Tensor& x, int win_h, int win_w);

// squeeze then smooth, once, before any inference
Tensor input_filter(const Tensor& x, const DefenseSpec& spec);

// Mean, argmax, and confidence from stacked per-pass rows [T,N,K]; sums run
// in pass order.
PredictiveDistribution aggregate_passes(const Tensor& passes);

// T stochastic passes, pass t seeded with derive_seed(base_seed, t). Batches
// larger than an internal slice run per slice with sub-derived seeds, so
// results never depend on the thread count, only on the fixed slice size.
PredictiveDistribution mc_dropout_predict(const ModelGraph& m, const Tensor& x, int T,
                                          uint64_t base_seed, ForwardMode mode);

// The full pipeline on whatever model is given (the paper setting is the
// quantized one): filter if enabled, then either T stochastic passes or a
// single deterministic one.
PredictiveDistribution stochastic_shield_predict(const ModelGraph& m, const Tensor& x,
                                                 const DefenseSpec& spec);

}  // namespace sshield
