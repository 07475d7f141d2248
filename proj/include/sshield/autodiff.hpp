#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "sshield/layers.hpp"

namespace sshield {

// Forward flavors. Stochastic keeps dropout active (inverted scaling) with
// masks drawn deterministically from the call's seed; FakeQuant inserts
// quantize-dequantize nodes at every annotated site. Gradients flow through
// fake-quant nodes with the straight-through estimator.
enum class ForwardMode : uint8_t {
  Deterministic,
  Stochastic,
  FakeQuant,
  FakeQuantStochastic,
};

inline bool mode_stochastic(ForwardMode m) {
  return m == ForwardMode::Stochastic || m == ForwardMode::FakeQuantStochastic;
}
inline bool mode_fake_quant(ForwardMode m) {
  return m == ForwardMode::FakeQuant || m == ForwardMode::FakeQuantStochastic;
}
// Picks the natural evaluation mode for a model: fake-quant iff quantized.
ForwardMode natural_mode(const ModelGraph& m, bool stochastic);

// Define-by-run tape. Node 0 is the input; subsequent nodes are produced in
// layer order with extra nodes for fake-quant sites. `value` keeps the
// activation for backward; `aux` keeps pool argmax / dropout masks.
struct TapeNode {
  LayerKind op;            // meaningful when layer >= 0
  int layer = -1;          // index into model.layers; -1 for input/fake-quant nodes
  bool is_fake_quant = false;
  bool is_input = false;
  std::array<int, 2> in = {-1, -1};
  Tensor value;
  Tensor aux;
};

struct ComputeGraph {
  std::vector<TapeNode> nodes;
  int output = -1;                 // logits node (input of the softmax head)
  std::vector<int> layer_node;     // layer index -> node holding its output
};

// Runs the model on an NHWC batch and returns pre-softmax logits [N,K].
// The trailing softmax layer marks the classifier head; probabilities are
// formed explicitly via softmax_rows when needed. Throws on shape mismatch or
// any non-finite intermediate.
Tensor forward(const ModelGraph& m, const Tensor& x, ForwardMode mode = ForwardMode::Deterministic,
               uint64_t seed = 0);
// Same, but also exposes the tape (for calibration and backward).
Tensor forward_tape(const ModelGraph& m, const Tensor& x, ForwardMode mode, uint64_t seed,
                    ComputeGraph& tape);

// Mean cross-entropy over the batch from logits, computed with the max-shifted
// log-sum-exp form.
double cross_entropy(const Tensor& logits, const std::vector<int>& labels);
// d(mean CE)/d(logits) = (softmax - onehot)/N.
Tensor cross_entropy_grad(const Tensor& logits, const std::vector<int>& labels);

struct ParamGrads {
  // Parallel to model.layers; empty tensors for layers without that parameter.
  std::vector<Tensor> dweights, dbias, dgamma, dbeta;
};

// Per-channel first/second moments of a BatchNorm input, used by the trainer.
struct BnBatchStats {
  Tensor mean, var;  // biased variance, per channel
};

struct BackwardOptions {
  bool input_grad = false;
  bool param_grads = false;
  // Trainer mode: BatchNorm normalizes with batch statistics (recorded per BN
  // layer, in layer order) instead of running estimates.
  bool bn_batch_stats = false;
};

struct BackwardResult {
  Tensor logits;
  double loss = 0.0;
  Tensor input_grad;
  ParamGrads param_grads;
  std::vector<BnBatchStats> bn_stats;  // one entry per BatchNorm layer, in layer order
};

BackwardResult run_backward(const ModelGraph& m, const Tensor& x, const std::vector<int>& labels,
                            ForwardMode mode, uint64_t seed, const BackwardOptions& opts);
// Backward from an externally supplied d(loss)/d(logits) (used by the CW
// attack, whose objective is not cross-entropy).
BackwardResult run_backward_from(const ModelGraph& m, const Tensor& x, const Tensor& logit_grad,
                                 ForwardMode mode, uint64_t seed, const BackwardOptions& opts);

// dL/dX of mean cross-entropy at the input, same shape as x.
Tensor input_gradient(const ModelGraph& m, const Tensor& x, const std::vector<int>& labels,
                      ForwardMode mode = ForwardMode::Deterministic, uint64_t seed = 0);
ParamGrads parameter_gradients(const ModelGraph& m, const Tensor& x, const std::vector<int>& labels,
                               ForwardMode mode = ForwardMode::Deterministic, uint64_t seed = 0);

// Mean CE of one forward pass; bn_batch_stats selects training-style
// BatchNorm. This is the scalar the finite-difference helpers probe.
double forward_loss(const ModelGraph& m, const Tensor& x, const std::vector<int>& labels,
                    ForwardMode mode, uint64_t seed, bool bn_batch_stats);

// Central-difference dL/dX, perturbing each input coordinate by ±h. The
// workhorse of the gradient checker; O(numel) forward passes, so keep inputs
// small.
Tensor finite_difference_input_gradient(const ModelGraph& m, const Tensor& x,
                                        const std::vector<int>& labels, float h,
                                        ForwardMode mode = ForwardMode::Deterministic, uint64_t seed = 0,
                                        bool bn_batch_stats = false);
// Central-difference gradients for every trainable parameter tensor.
ParamGrads finite_difference_parameter_gradients(const ModelGraph& m, const Tensor& x,
                                                 const std::vector<int>& labels, float h,
                                                 ForwardMode mode = ForwardMode::Deterministic,
                                                 uint64_t seed = 0, bool bn_batch_stats = false);

}  // namespace sshield
