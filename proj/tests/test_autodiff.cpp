#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sshield/autodiff.hpp"
#include "sshield/oracles.hpp"
#include "sshield/rng.hpp"

using namespace sshield;

namespace {

Tensor random_tensor(std::vector<int> shape, uint64_t seed, float lo = 0.f, float hi = 1.f) {
  Tensor t(std::move(shape));
  RandomStream rs(seed);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rs.uniform(lo, hi);
  return t;
}

// input {1,1,F} -> flatten -> dense(F,K) -> softmax
ModelGraph tiny_dense_model(int f, int k) {
  ModelGraph m;
  m.input = {1, 1, f};
  m.n_classes = k;
  m.layers.push_back(flatten_layer());
  m.layers.push_back(dense_layer(f, k));
  m.layers.push_back(softmax_layer());
  return m;
}

// small conv net for gradient checking: conv -> (optional bn) -> relu -> pool
// -> flatten -> dense
ModelGraph small_cnn(int hw, int cin, int cmid, int k, bool with_bn, bool with_dropout,
                     uint64_t init_seed) {
  ModelGraph m;
  m.input = {hw, hw, cin};
  m.n_classes = k;
  m.layers.push_back(conv_layer(3, 3, cin, cmid, 1, Padding::Same));
  if (with_bn) m.layers.push_back(batchnorm_layer(cmid));
  m.layers.push_back(relu_layer());
  m.layers.push_back(maxpool_layer(2, 2));
  if (with_dropout) m.layers.push_back(dropout_layer(0.25f));
  m.layers.push_back(flatten_layer());
  int half = (hw - 2) / 2 + 1;
  m.layers.push_back(dense_layer(half * half * cmid, k));
  m.layers.push_back(softmax_layer());
  init_he(m, init_seed);
  // non-trivial BN stats so the affine path is exercised
  for (Layer& l : m.layers)
    if (l.kind == LayerKind::BatchNorm) {
      RandomStream rs(init_seed + 1);
      for (int64_t i = 0; i < l.gamma.numel(); ++i) {
        l.gamma[i] = rs.uniform(0.5f, 1.5f);
        l.beta[i] = rs.uniform(-0.2f, 0.2f);
        l.running_mean[i] = rs.uniform(-0.3f, 0.3f);
        l.running_var[i] = rs.uniform(0.5f, 2.f);
      }
    }
  return m;
}

}  // namespace

TEST_CASE("identity dense maps input straight to logits") {
  ModelGraph m = tiny_dense_model(2, 2);
  m.layers[1].weights = Tensor({2, 2}, {1, 0, 0, 1});
  Tensor x({1, 1, 1, 2}, {1.f, 2.f});
  Tensor z = forward(m, x);
  CHECK(z[0] == 1.f);
  CHECK(z[1] == 2.f);
}

TEST_CASE("deterministic forward is referentially transparent") {
  ModelGraph m = small_cnn(8, 2, 4, 5, true, false, 3);
  Tensor x = random_tensor({3, 8, 8, 2}, 10);
  Tensor a = forward(m, x);
  Tensor b = forward(m, x);
  CHECK(max_abs_diff(a, b) == 0.f);
}

TEST_CASE("stochastic mode with dropout rate 0 equals deterministic mode") {
  ModelGraph m = small_cnn(8, 1, 3, 4, false, true, 5);
  for (Layer& l : m.layers)
    if (l.kind == LayerKind::Dropout) l.rate = 0.f;
  Tensor x = random_tensor({2, 8, 8, 1}, 11);
  Tensor det = forward(m, x, ForwardMode::Deterministic);
  Tensor sto = forward(m, x, ForwardMode::Stochastic, 999);
  CHECK(max_abs_diff(det, sto) == 0.f);
}

TEST_CASE("stochastic forward is a pure function of the seed") {
  ModelGraph m = small_cnn(8, 1, 3, 4, false, true, 6);
  Tensor x = random_tensor({2, 8, 8, 1}, 12);
  Tensor a = forward(m, x, ForwardMode::Stochastic, 42);
  Tensor b = forward(m, x, ForwardMode::Stochastic, 42);
  Tensor c = forward(m, x, ForwardMode::Stochastic, 43);
  CHECK(max_abs_diff(a, b) == 0.f);
  CHECK(max_abs_diff(a, c) > 0.f);
}

TEST_CASE("batch forward equals per-sample forwards concatenated") {
  ModelGraph m = small_cnn(10, 2, 4, 6, true, true, 7);
  Tensor x = random_tensor({5, 10, 10, 2}, 13);
  Tensor whole = forward(m, x);
  int64_t per = whole.numel() / 5;
  for (int s = 0; s < 5; ++s) {
    Tensor one = forward(m, batch_slice(x, s, 1));
    for (int64_t i = 0; i < per; ++i) CHECK(whole[s * per + i] == one[i]);
  }
}

TEST_CASE("cross entropy is stable at extreme logits") {
  Tensor z({2, 3}, {1e4f, 0.f, -1e4f, 30.f, 10.f, -5.f});
  double loss = cross_entropy(z, {0, 0});
  CHECK(std::isfinite(loss));
  CHECK(loss >= 0.0);
  // both rows: true class dominates by >=20 logits, loss ~0 but finite
  CHECK(loss < 1e-4);
}

TEST_CASE("cross entropy gradient rows sum to zero") {
  Tensor z = random_tensor({4, 6}, 20, -3.f, 3.f);
  Tensor g = cross_entropy_grad(z, {0, 1, 2, 3});
  for (int s = 0; s < 4; ++s) {
    float sum = 0.f;
    for (int k = 0; k < 6; ++k) sum += g[s * 6 + k];
    CHECK(std::abs(sum) < 1e-6f);
  }
}

TEST_CASE("logistic slope example: single active weight") {
  // one feature, two classes, weights [[1],[0]]: p(class0) = sigmoid(x)
  ModelGraph m = tiny_dense_model(1, 2);
  m.layers[1].weights = Tensor({1, 2}, {1.f, 0.f});
  Tensor x({1, 1, 1, 1}, {0.5f});
  Tensor g = input_gradient(m, x, {0});
  float sigmoid = 1.f / (1.f + std::exp(-0.5f));
  CHECK(g[0] == doctest::Approx(sigmoid - 1.f).epsilon(1e-4));  // -0.37754
}

TEST_CASE("zero-weight network has zero gradient everywhere") {
  ModelGraph m = small_cnn(6, 1, 2, 3, false, false, 9);
  for (Layer& l : m.layers)
    if (l.has_weights()) {
      l.weights.fill(0.f);
      l.bias.fill(0.f);
    }
  Tensor x = random_tensor({2, 6, 6, 1}, 14);
  Tensor g = input_gradient(m, x, {0, 1});
  for (int64_t i = 0; i < g.numel(); ++i) CHECK(g[i] == 0.f);
}

TEST_CASE("dense weight gradient is the textbook outer product") {
  ModelGraph m = tiny_dense_model(3, 4);
  init_he(m, 17);
  Tensor x = random_tensor({1, 1, 1, 3}, 18, -1.f, 1.f);
  ParamGrads pg = parameter_gradients(m, x, {2});
  Tensor logits = forward(m, x);
  Tensor p = softmax_rows(logits);
  p[2] -= 1.f;
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 4; ++k)
      CHECK(pg.dweights[1][i * 4 + k] == doctest::Approx(x[i] * p[k]).epsilon(1e-4));
  for (int k = 0; k < 4; ++k) CHECK(pg.dbias[1][k] == doctest::Approx(p[k]).epsilon(1e-4));
}

TEST_CASE("duplicated sample gives the same mean gradient as the single sample") {
  ModelGraph m = small_cnn(6, 1, 3, 4, false, false, 21);
  Tensor one = random_tensor({1, 6, 6, 1}, 22);
  Tensor two({2, 6, 6, 1});
  std::copy(one.data(), one.data() + one.numel(), two.data());
  std::copy(one.data(), one.data() + one.numel(), two.data() + one.numel());
  ParamGrads g1 = parameter_gradients(m, one, {1});
  ParamGrads g2 = parameter_gradients(m, two, {1, 1});
  for (size_t i = 0; i < m.layers.size(); ++i)
    if (!g1.dweights[i].empty())
      CHECK(max_abs_diff(g1.dweights[i], g2.dweights[i]) < 1e-6f);
}

TEST_CASE("scalar central difference nails simple derivatives") {
  CHECK(oracle::finite_difference([](double v) { return v * v; }, 3.0, 1e-3) ==
        doctest::Approx(6.0).epsilon(1e-7));
  CHECK(oracle::finite_difference([](double v) { return v * v * v; }, 2.0, 1e-3) ==
        doctest::Approx(12.0).epsilon(1e-5));
  CHECK(oracle::finite_difference([](double) { return 4.2; }, 1.0, 1e-3) == doctest::Approx(0.0));
}

TEST_CASE("finite differences on a constant model vanish") {
  ModelGraph m = small_cnn(5, 1, 2, 3, false, false, 30);
  for (Layer& l : m.layers)
    if (l.has_weights()) l.weights.fill(0.f);
  Tensor x = random_tensor({1, 5, 5, 1}, 31);
  Tensor fd = finite_difference_input_gradient(m, x, {0}, 1e-3f);
  for (int64_t i = 0; i < fd.numel(); ++i) CHECK(std::abs(fd[i]) < 1e-6f);
}

TEST_CASE("analytic gradients match finite differences on small models") {
  // deterministic, with and without batchnorm
  for (uint64_t seed : {41u, 42u}) {
    ModelGraph m = small_cnn(6, 1, 3, 4, seed == 42u, false, seed);
    Tensor x = random_tensor({2, 6, 6, 1}, seed + 5);
    auto r = oracle::gradient_check(m, x, {0, 2}, 1e-3f, 1e-2, 0.99);
    INFO("seed ", seed, " max_rel ", r.max_rel_err, " frac ", r.frac_within);
    CHECK(r.pass);
  }
}

TEST_CASE("gradients are exact through active dropout with a fixed seed") {
  ModelGraph m = small_cnn(6, 1, 3, 4, false, true, 50);
  Tensor x = random_tensor({2, 6, 6, 1}, 51);
  auto r = oracle::gradient_check(m, x, {1, 3}, 1e-3f, 1e-2, 0.99, ForwardMode::Stochastic, 1234);
  INFO("max_rel ", r.max_rel_err, " frac ", r.frac_within);
  CHECK(r.pass);
}

TEST_CASE("training-style batchnorm gradients match finite differences") {
  ModelGraph m = small_cnn(6, 1, 3, 4, true, false, 60);
  Tensor x = random_tensor({4, 6, 6, 1}, 61);
  auto r = oracle::gradient_check(m, x, {0, 1, 2, 3}, 1e-3f, 1e-2, 0.99, ForwardMode::Deterministic, 0,
                                  5e-2, true);
  INFO("max_rel ", r.max_rel_err, " frac ", r.frac_within);
  CHECK(r.pass);
}

TEST_CASE("residual connections propagate gradients to both branches") {
  ModelGraph m;
  m.input = {4, 4, 2};
  m.n_classes = 3;
  m.layers.push_back(conv_layer(3, 3, 2, 2, 1, Padding::Same));
  m.layers.push_back(relu_layer());
  m.layers.push_back(conv_layer(3, 3, 2, 2, 1, Padding::Same));
  m.layers.push_back(add_layer(1));  // skip over the second conv
  m.layers.push_back(flatten_layer());
  m.layers.push_back(dense_layer(32, 3));
  m.layers.push_back(softmax_layer());
  init_he(m, 70);
  Tensor x = random_tensor({2, 4, 4, 2}, 71);
  auto r = oracle::gradient_check(m, x, {0, 1}, 1e-3f, 1e-2, 0.99);
  INFO("max_rel ", r.max_rel_err, " frac ", r.frac_within);
  CHECK(r.pass);
}

TEST_CASE("depthwise conv and global pooling gradients check out") {
  ModelGraph m;
  m.input = {6, 6, 3};
  m.n_classes = 3;
  m.layers.push_back(dwconv_layer(3, 3, 3, 1, Padding::Same));
  m.layers.push_back(relu_layer());
  m.layers.push_back(gap_layer());
  m.layers.push_back(dense_layer(3, 3));
  m.layers.push_back(softmax_layer());
  init_he(m, 80);
  Tensor x = random_tensor({2, 6, 6, 3}, 81);
  auto r = oracle::gradient_check(m, x, {0, 2}, 1e-3f, 1e-2, 0.99);
  INFO("max_rel ", r.max_rel_err, " frac ", r.frac_within);
  CHECK(r.pass);
}

TEST_CASE("forward rejects bad inputs") {
  ModelGraph m = small_cnn(6, 1, 2, 3, false, false, 90);
  CHECK_THROWS(forward(m, Tensor({1, 5, 5, 1})));  // wrong spatial size
  Tensor x = random_tensor({1, 6, 6, 1}, 91);
  x[3] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS(forward(m, x));
  CHECK_THROWS(cross_entropy(forward(m, clamp(x, 0.f, 1.f)), {7}));  // label out of range
}
