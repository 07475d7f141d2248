#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>

#include "sshield/autodiff.hpp"
#include "sshield/layers.hpp"
#include "sshield/rng.hpp"

using namespace sshield;

namespace {
std::vector<int> conv_channels(const ModelGraph& m) {
  std::vector<int> out;
  for (const Layer& l : m.layers)
    if (l.kind == LayerKind::Conv2D) out.push_back(l.weights.dim(3));
  return out;
}
std::vector<float> dropout_rates(const ModelGraph& m) {
  std::vector<float> out;
  for (const Layer& l : m.layers)
    if (l.kind == LayerKind::Dropout) out.push_back(l.rate);
  return out;
}
}  // namespace

TEST_CASE("svhn-style cnn has the published structure at width 1.0") {
  ModelGraph m = build_cnn_svhn(1.f);
  CHECK(conv_channels(m) == std::vector<int>{32, 32, 64, 64, 128, 128});
  CHECK(dropout_rates(m) == std::vector<float>{0.3f, 0.3f, 0.3f, 0.3f});
  CHECK(m.layers.back().kind == LayerKind::Softmax);
  // dense head: 512 hidden units then n_classes
  std::vector<int> dense_outs;
  for (const Layer& l : m.layers)
    if (l.kind == LayerKind::Dense) dense_outs.push_back(l.weights.dim(1));
  CHECK(dense_outs == std::vector<int>{512, 10});
}

TEST_CASE("width multiplier scales conv channels") {
  ModelGraph m = build_cnn_svhn(0.25f);
  CHECK(conv_channels(m) == std::vector<int>{8, 8, 16, 16, 32, 32});
  CHECK(dropout_rates(m) == std::vector<float>{0.3f, 0.3f, 0.3f, 0.3f});
  CHECK_THROWS(build_cnn_svhn(0.f));
  CHECK_THROWS(build_cnn_svhn(1.5f));
}

TEST_CASE("vgg16 matches its published layer recipe") {
  ModelGraph m = build_vgg16();
  CHECK(conv_channels(m) ==
        std::vector<int>{64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512});
  std::map<float, int> rates;
  for (float r : dropout_rates(m)) rates[r]++;
  CHECK(rates[0.3f] == 1);
  CHECK(rates[0.4f] == 7);
  CHECK(rates[0.5f] == 2);
  // head: ... MaxPool, Dropout 0.5, Flatten, Dense 512, Dropout 0.5, Dense 10, Softmax
  size_t L = m.layers.size();
  CHECK(m.layers[L - 1].kind == LayerKind::Softmax);
  CHECK(m.layers[L - 2].kind == LayerKind::Dense);
  CHECK(m.layers[L - 2].weights.dim(1) == 10);
  CHECK(m.layers[L - 3].kind == LayerKind::Dropout);
  CHECK(m.layers[L - 3].rate == 0.5f);
  CHECK(m.layers[L - 4].kind == LayerKind::Dense);
  CHECK(m.layers[L - 4].weights.dim(1) == 512);
}

TEST_CASE("mobilenetv2 has the published block structure") {
  ModelGraph m = build_mobilenetv2();
  // count inverted-residual blocks by their depthwise convs: repeats 1+2+3+4+3+3+1
  int n_dw = 0;
  for (const Layer& l : m.layers)
    if (l.kind == LayerKind::DepthwiseConv2D) ++n_dw;
  CHECK(n_dw == 17);
  std::vector<float> rates = dropout_rates(m);
  CHECK(rates == std::vector<float>{0.25f, 0.25f, 0.25f, 0.25f});
  // projection conv outputs visit the filter ladder
  std::vector<int> proj;
  for (size_t i = 0; i + 1 < m.layers.size(); ++i)
    if (m.layers[i].kind == LayerKind::DepthwiseConv2D)
      for (size_t j = i + 1; j < m.layers.size(); ++j)
        if (m.layers[j].kind == LayerKind::Conv2D) {
          proj.push_back(m.layers[j].weights.dim(3));
          break;
        }
  std::vector<int> firsts;
  int last = -1;
  for (int p : proj)
    if (p != last) {
      firsts.push_back(p);
      last = p;
    }
  CHECK(firsts == std::vector<int>{16, 24, 32, 64, 96, 160, 320});
  int n_add = 0;
  for (const Layer& l : m.layers)
    if (l.kind == LayerKind::Add) ++n_add;
  CHECK(n_add == 1 + 2 + 3 + 2 + 2 + 0);  // repeats minus first block of each stage, stride-1 stages only
}

TEST_CASE("all builders shape-check end to end and run a forward pass") {
  for (const char* name : {"cnn-svhn", "vgg16", "mobilenetv2"}) {
    ModelGraph m = build_model(name, 1.f, {32, 32, 3}, 10);
    init_he(m, 7);
    auto shapes = infer_shapes(m, 2);
    CHECK(shapes.back() == std::vector<int>{2, 10});
    Tensor x({2, 32, 32, 3});
    RandomStream rs(3);
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = rs.uniform();
    Tensor logits = forward(m, x);
    CHECK(logits.shape() == std::vector<int>{2, 10});
    CHECK(logits.all_finite());
  }
}

TEST_CASE("residual add requires matching shapes") {
  ModelGraph m;
  m.input = {8, 8, 3};
  m.n_classes = 2;
  m.layers.push_back(conv_layer(3, 3, 3, 4));
  m.layers.push_back(conv_layer(3, 3, 4, 8));
  m.layers.push_back(add_layer(0));  // 4 channels vs 8 channels
  m.layers.push_back(flatten_layer());
  m.layers.push_back(dense_layer(8 * 8 * 8, 2));
  m.layers.push_back(softmax_layer());
  CHECK_THROWS(validate_model(m));
}

TEST_CASE("misplaced softmax is rejected") {
  ModelGraph m;
  m.input = {4, 4, 1};
  m.n_classes = 2;
  m.layers.push_back(flatten_layer());
  m.layers.push_back(softmax_layer());
  m.layers.push_back(dense_layer(16, 2));
  CHECK_THROWS(validate_model(m));
}

TEST_CASE("init_he is deterministic in the seed") {
  ModelGraph a = build_cnn_svhn(0.25f, {16, 16, 1}, 10);
  ModelGraph b = build_cnn_svhn(0.25f, {16, 16, 1}, 10);
  init_he(a, 42);
  init_he(b, 42);
  for (size_t i = 0; i < a.layers.size(); ++i)
    if (a.layers[i].has_weights())
      CHECK(max_abs_diff(a.layers[i].weights, b.layers[i].weights) == 0.f);
  init_he(b, 43);
  bool any_diff = false;
  for (size_t i = 0; i < a.layers.size(); ++i)
    if (a.layers[i].has_weights() && max_abs_diff(a.layers[i].weights, b.layers[i].weights) > 0.f)
      any_diff = true;
  CHECK(any_diff);
}
