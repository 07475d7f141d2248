#include <cmath>
#include <stdexcept>

#include "sshield/layers.hpp"

namespace sshield {

namespace {

int scaled(int c, float width) { return std::max(1, int(std::lround(double(c) * double(width)))); }

void conv_bn_relu(ModelGraph& m, int cin, int cout, int stride = 1) {
  m.layers.push_back(conv_layer(3, 3, cin, cout, stride, Padding::Same));
  m.layers.push_back(batchnorm_layer(cout));
  m.layers.push_back(relu_layer());
}

}  // namespace

ModelGraph build_cnn_svhn(float width, InputSpec in, int n_classes) {
  if (!(width > 0.f && width <= 1.f)) throw std::invalid_argument("width multiplier must be in (0,1]");
  ModelGraph m;
  m.input = in;
  m.n_classes = n_classes;
  m.arch = "cnn-svhn";
  int c = in.c;
  for (int block = 0; block < 3; ++block) {
    int ch = scaled(32 << block, width);
    conv_bn_relu(m, c, ch);
    conv_bn_relu(m, ch, ch);
    m.layers.push_back(maxpool_layer(2, 2));
    m.layers.push_back(dropout_layer(0.3f));
    c = ch;
  }
  m.layers.push_back(flatten_layer());
  int h = in.h, w = in.w;
  for (int i = 0; i < 3; ++i) {
    h = (h - 2) / 2 + 1;
    w = (w - 2) / 2 + 1;
  }
  m.layers.push_back(dense_layer(h * w * c, 512));
  m.layers.push_back(relu_layer());
  m.layers.push_back(dropout_layer(0.3f));
  m.layers.push_back(dense_layer(512, n_classes));
  m.layers.push_back(softmax_layer());
  validate_model(m);
  return m;
}

ModelGraph build_vgg16(InputSpec in, int n_classes) {
  ModelGraph m;
  m.input = in;
  m.n_classes = n_classes;
  m.arch = "vgg16";
  int c = in.c;
  // Per-stage conv widths with the dropout/pool pattern of the CIFAR-10 VGG16
  // variant: dropout between convs of a stage, pool at stage end.
  const int stage_convs[5] = {2, 2, 3, 3, 3};
  const int stage_width[5] = {64, 128, 256, 512, 512};
  float inner_rate = 0.3f;  // first stage uses 0.3, later stages 0.4
  for (int s = 0; s < 5; ++s) {
    for (int k = 0; k < stage_convs[s]; ++k) {
      if (k > 0) m.layers.push_back(dropout_layer(inner_rate));
      conv_bn_relu(m, c, stage_width[s]);
      c = stage_width[s];
    }
    m.layers.push_back(maxpool_layer(2, 2));
    inner_rate = 0.4f;
  }
  m.layers.push_back(dropout_layer(0.5f));
  m.layers.push_back(flatten_layer());
  int h = in.h >> 5, w = in.w >> 5;
  m.layers.push_back(dense_layer(h * w * c, 512));
  m.layers.push_back(dropout_layer(0.5f));
  m.layers.push_back(dense_layer(512, n_classes));
  m.layers.push_back(softmax_layer());
  validate_model(m);
  return m;
}

namespace {

// expansion 1x1 conv + BN + ReLU, depthwise 3x3 + BN + ReLU, projection 1x1
// conv + BN; residual add when the block preserves shape.
void inverted_residual(ModelGraph& m, int cin, int cout, int stride, int expand) {
  int block_input = int(m.layers.size()) - 1;
  int mid = cin * expand;
  m.layers.push_back(conv_layer(1, 1, cin, mid, 1, Padding::Same));
  m.layers.push_back(batchnorm_layer(mid));
  m.layers.push_back(relu_layer());
  m.layers.push_back(dwconv_layer(3, 3, mid, stride, Padding::Same));
  m.layers.push_back(batchnorm_layer(mid));
  m.layers.push_back(relu_layer());
  m.layers.push_back(conv_layer(1, 1, mid, cout, 1, Padding::Same));
  m.layers.push_back(batchnorm_layer(cout));
  if (stride == 1 && cin == cout && block_input >= 0) m.layers.push_back(add_layer(block_input));
}

}  // namespace

ModelGraph build_mobilenetv2(InputSpec in, int n_classes) {
  ModelGraph m;
  m.input = in;
  m.n_classes = n_classes;
  m.arch = "mobilenetv2";
  conv_bn_relu(m, in.c, 32, 1);  // ImageNet stride 2 dropped for 32x32 inputs
  const int filters[7] = {16, 24, 32, 64, 96, 160, 320};
  const int repeats[7] = {1, 2, 3, 4, 3, 3, 1};
  const int strides[7] = {1, 1, 2, 2, 1, 2, 1};  // stage 2's ImageNet stride 2 also dropped
  // Dropout 0.25 follows the 64-, 96-, 160- and 320-filter stages.
  const bool drop_after[7] = {false, false, false, true, true, true, true};
  int c = 32;
  for (int s = 0; s < 7; ++s) {
    int expand = s == 0 ? 1 : 6;
    for (int r = 0; r < repeats[s]; ++r) {
      inverted_residual(m, c, filters[s], r == 0 ? strides[s] : 1, expand);
      c = filters[s];
    }
    if (drop_after[s]) m.layers.push_back(dropout_layer(0.25f));
  }
  conv_bn_relu(m, c, 1280, 1);
  m.layers.push_back(gap_layer());
  m.layers.push_back(dense_layer(1280, n_classes));
  m.layers.push_back(softmax_layer());
  validate_model(m);
  return m;
}

ModelGraph build_model(const std::string& name, float width, InputSpec in, int n_classes) {
  if (name == "cnn-svhn") return build_cnn_svhn(width, in, n_classes);
  if (name == "vgg16") return build_vgg16(in, n_classes);
  if (name == "mobilenetv2") return build_mobilenetv2(in, n_classes);
  throw std::invalid_argument("unknown model builder '" + name + "' (expected cnn-svhn, vgg16 or mobilenetv2)");
}

}  // namespace sshield
