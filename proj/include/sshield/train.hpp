#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "sshield/autodiff.hpp"
#include "sshield/data.hpp"
#include "sshield/metrics.hpp"

namespace sshield {

struct EpochStats {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double test_accuracy = 0.0;
  double lr = 0.0;
};

struct TrainConfig {
  int epochs = 10;
  int batch_size = 64;
  float lr = 0.05f;
  // Step decay: every decay_every epochs the rate is multiplied by lr_decay.
  // decay_every == 0 keeps the rate constant.
  float lr_decay = 1.f;
  int decay_every = 0;
  float momentum = 0.9f;
  float weight_decay = 0.f;  // applied to conv/dense kernels only
  uint64_t seed = 0;
  std::function<void(const EpochStats&)> on_epoch;  // progress hook, may be empty
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
};

// Mini-batch SGD with momentum on mean cross-entropy. Dropout stays active;
// BatchNorm normalizes each batch with its own statistics while the layers'
// running estimates track them exponentially for later inference. Layer kinds
// and shapes never change, only parameter tensors. Deterministic for a fixed
// seed and thread count.
TrainHistory train(ModelGraph& m, const Dataset& train_set, const Dataset& test_set,
                   const TrainConfig& cfg);

// Softmax probabilities [N,K] over a whole split, batched internally to bound
// memory. Stochastic modes draw a distinct sub-seed per internal batch, so
// their masks depend on the fixed internal batch size; deterministic modes do
// not consume the seed at all.
Tensor predict_probs(const ModelGraph& m, const Dataset& split,
                     ForwardMode mode = ForwardMode::Deterministic, uint64_t seed = 0);

// Accuracy + calibration over a split using argmax of the softmax output.
EvalReport evaluate(const ModelGraph& m, const Dataset& split,
                    ForwardMode mode = ForwardMode::Deterministic, uint64_t seed = 0,
                    int n_bins = 10);

}  // namespace sshield
