#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sshield/quant_params.hpp"
#include "sshield/tensor.hpp"

namespace sshield {

enum class LayerKind : uint8_t {
  Conv2D,
  DepthwiseConv2D,
  Dense,
  BatchNorm,
  ReLU,
  MaxPool2D,
  GlobalAvgPool,
  Dropout,
  Flatten,
  Softmax,
  Add,
};

const char* layer_kind_name(LayerKind k);
LayerKind layer_kind_from_name(const std::string& name);

enum class Padding : uint8_t { Valid, Same };

// One layer of a sequential-with-skips graph. Unused fields stay empty.
// Weight layouts: Conv2D [kh,kw,Cin,Cout], DepthwiseConv2D [kh,kw,C],
// Dense [In,Out]; bias [Cout]/[C]/[Out]. BatchNorm holds per-channel
// gamma/beta/running_mean/running_var of shape [C].
struct Layer {
  LayerKind kind;

  Tensor weights, bias;
  Tensor gamma, beta, running_mean, running_var;

  int kernel_h = 0, kernel_w = 0;
  int stride = 1;
  Padding padding = Padding::Same;
  float rate = 0.f;   // dropout probability
  int skip_src = -1;  // Add: index of the layer whose output is the second operand

  // Set by the quantizer. weight_qp describes the int8 grid of `weights`
  // (whose values are then exactly on that grid); out_qp describes the uint8
  // grid applied to this layer's output in fake-quant forward modes.
  std::optional<QuantParams> weight_qp;
  std::optional<QuantParams> out_qp;

  bool has_weights() const {
    return kind == LayerKind::Conv2D || kind == LayerKind::DepthwiseConv2D || kind == LayerKind::Dense;
  }
  bool has_bn_params() const { return kind == LayerKind::BatchNorm; }
};

struct InputSpec {
  int h = 0, w = 0, c = 0;
  bool operator==(const InputSpec&) const = default;
};

struct ModelGraph {
  std::vector<Layer> layers;
  InputSpec input;
  int n_classes = 0;
  std::string arch;  // builder id, e.g. "cnn-svhn-w1.0"
  bool quantized = false;
  std::optional<QuantParams> input_qp;

  int64_t parameter_count() const;
};

// Layer constructors (parameters zero-initialized; see init_he).
Layer conv_layer(int kh, int kw, int cin, int cout, int stride = 1, Padding pad = Padding::Same);
Layer dwconv_layer(int kh, int kw, int c, int stride = 1, Padding pad = Padding::Same);
Layer dense_layer(int in, int out);
Layer batchnorm_layer(int c);
Layer relu_layer();
Layer maxpool_layer(int k = 2, int stride = 0);  // stride 0 -> same as k
Layer gap_layer();
Layer dropout_layer(float rate);
Layer flatten_layer();
Layer softmax_layer();
Layer add_layer(int skip_src);

// Output spatial size for one conv/pool axis.
int conv_out_dim(int in, int k, int stride, Padding pad);
// Pad before/after for Same padding (TF convention: extra pixel goes after).
void same_pad_amounts(int in, int k, int stride, int* pad_before, int* pad_total);

// Walks the graph symbolically and returns the output shape of each layer for
// batch size n; throws on any incompatibility (wrong ranks, channel
// mismatches, Add operands of different shapes, misplaced Softmax).
std::vector<std::vector<int>> infer_shapes(const ModelGraph& m, int n = 1);
void validate_model(const ModelGraph& m);

// --- stateless kernels -----------------------------------------------------
// x is NHWC [N,H,W,C] for spatial ops, [N,F] for dense ops. All kernels run
// per-sample inner loops (see linalg.hpp for why).

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, Padding pad);
Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, Padding pad);
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor relu(const Tensor& x);
// argmax_out (optional) receives the flat input index chosen per output cell,
// stored as float; backward scatters through it.
Tensor maxpool2d(const Tensor& x, int kh, int kw, int stride, Tensor* argmax_out = nullptr);
Tensor global_avg_pool(const Tensor& x);
Tensor batchnorm_inference(const Tensor& x, const Layer& bn);
// Inverted dropout: kept units scaled by 1/(1-rate); mask drawn from `seed`
// independently per element. mask_out (optional) receives the applied
// multiplier (0 or 1/(1-rate)) per element.
Tensor dropout_apply(const Tensor& x, float rate, uint64_t seed, Tensor* mask_out = nullptr);
Tensor softmax_rows(const Tensor& logits);

constexpr float kBatchNormEps = 1e-5f;

// --- model builders --------------------------------------------------------
// Channel counts scale by `width` (rounded to nearest, min 1) except the
// classifier head.
ModelGraph build_cnn_svhn(float width = 1.f, InputSpec in = {32, 32, 3}, int n_classes = 10);
ModelGraph build_vgg16(InputSpec in = {32, 32, 3}, int n_classes = 10);
ModelGraph build_mobilenetv2(InputSpec in = {32, 32, 3}, int n_classes = 10);
ModelGraph build_model(const std::string& name, float width, InputSpec in, int n_classes);

// He-normal fan-in init for conv/dense weights, zero biases, BN gamma=1 beta=0
// running_mean=0 running_var=1. Deterministic in `seed`.
void init_he(ModelGraph& m, uint64_t seed);

}  // namespace sshield
