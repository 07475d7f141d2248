#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "sshield/autodiff.hpp"
#include "sshield/oracles.hpp"
#include "sshield/quantize.hpp"
#include "sshield/rng.hpp"

using namespace sshield;

namespace {

Tensor random_tensor(std::vector<int> shape, uint64_t seed, float lo, float hi) {
  Tensor t(std::move(shape));
  RandomStream rs(seed);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rs.uniform(lo, hi);
  return t;
}

void randomize_bn(ModelGraph& m, uint64_t seed) {
  RandomStream rs(seed);
  for (Layer& l : m.layers) {
    if (l.kind != LayerKind::BatchNorm) continue;
    for (int64_t i = 0; i < l.gamma.numel(); ++i) {
      l.gamma[i] = rs.uniform(0.5f, 1.5f);
      l.beta[i] = rs.uniform(-0.3f, 0.3f);
      l.running_mean[i] = rs.uniform(-0.2f, 0.2f);
      l.running_var[i] = rs.uniform(0.5f, 2.f);
    }
  }
}

double rel_l2(const Tensor& a, const Tensor& b) {
  double na = 0;
  for (int64_t i = 0; i < a.numel(); ++i) na += double(a[i]) * a[i];
  return l2_diff(a, b) / (std::sqrt(na) + 1e-12);
}

ModelGraph identity_dense_model(int f) {
  ModelGraph m;
  m.input = {1, 1, f};
  m.n_classes = f;
  m.arch = "toy";
  m.layers.push_back(flatten_layer());
  Layer d = dense_layer(f, f);
  for (int i = 0; i < f; ++i) d.weights[i * f + i] = 1.f;
  m.layers.push_back(d);
  m.layers.push_back(softmax_layer());
  validate_model(m);
  return m;
}

}  // namespace

TEST_CASE("symmetric weight grid hits exact points") {
  Tensor w({3}, {0.5f, 1.27f, -1.27f});
  QuantParams qp = weight_qparams(w);
  CHECK(qp.symmetric);
  CHECK(qp.zero_point == 0);
  CHECK(qp.scale == doctest::Approx(0.01).epsilon(1e-6));
  QuantizedTensor r = quantize_tensor(w, qp);
  CHECK(r.q[0] == doctest::Approx(50));
  CHECK(r.q[1] == doctest::Approx(127));
  CHECK(r.q[2] == doctest::Approx(-127));
  CHECK(r.dequant[0] == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(r.dequant[1] == doctest::Approx(1.27).epsilon(1e-6));
  CHECK(r.dequant[2] == doctest::Approx(-1.27).epsilon(1e-6));
}

TEST_CASE("asymmetric out-of-range input saturates at the top code") {
  QuantParams qp = activation_qparams(0.f, 2.55f);
  CHECK(qp.scale == doctest::Approx(0.01).epsilon(1e-6));
  CHECK(qp.zero_point == 0);
  Tensor x({1}, {5.f});
  QuantizedTensor r = quantize_tensor(x, qp);
  CHECK(r.q[0] == 255.f);
  CHECK(r.dequant[0] == doctest::Approx(2.55).epsilon(1e-6));
}

TEST_CASE("roundtrip error stays within half a step for in-range values") {
  struct Range {
    float lo, hi;
  } ranges[] = {{-1.f, 1.f}, {0.f, 3.7f}, {-2.55f, 0.f}, {-0.01f, 6.f}};
  int k = 0;
  for (auto rg : ranges) {
    QuantParams qp = activation_qparams(rg.lo, rg.hi);
    Tensor x = random_tensor({5000}, 100 + uint64_t(k++), qp.real_min(), qp.real_max());
    QuantizedTensor r = quantize_tensor(x, qp);
    for (int64_t i = 0; i < x.numel(); ++i) {
      CHECK(std::abs(x[i] - r.dequant[i]) <= qp.scale * 0.5000004f);
    }
  }
  QuantParams wq = weight_qparams(Tensor({1}, {0.73f}));
  Tensor x = random_tensor({5000}, 7, wq.real_min(), wq.real_max());
  QuantizedTensor r = quantize_tensor(x, wq);
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(std::abs(x[i] - r.dequant[i]) <= wq.scale * 0.5000004f);
}

TEST_CASE("quantization is monotone") {
  QuantParams qp = activation_qparams(-1.3f, 2.2f);
  Tensor x = random_tensor({4000}, 11, -2.f, 3.f);  // extends past both clamp edges
  std::sort(x.vec().begin(), x.vec().end());
  QuantizedTensor r = quantize_tensor(x, qp);
  for (int64_t i = 1; i < x.numel(); ++i) {
    CHECK(r.q[i] >= r.q[i - 1]);
    CHECK(r.dequant[i] >= r.dequant[i - 1]);
  }
}

TEST_CASE("activation grids cover the observed range and represent zero") {
  RandomStream rs(42);
  for (int t = 0; t < 200; ++t) {
    float a = rs.uniform(-5.f, 5.f), b = rs.uniform(-5.f, 5.f);
    float lo = std::min(a, b), hi = std::max(a, b);
    QuantParams qp = activation_qparams(lo, hi);
    CHECK(qp.scale > 0.f);
    CHECK(qp.zero_point >= 0);
    CHECK(qp.zero_point <= 255);
    CHECK(qp.real_min() <= std::min(lo, 0.f));
    CHECK(qp.real_max() >= std::max(hi, 0.f));
    CHECK(fake_quant_value(0.f, qp) == 0.f);
  }
  CHECK_THROWS(activation_qparams(1.f, 0.f));
  QuantParams degenerate = activation_qparams(0.f, 0.f);
  CHECK(degenerate.scale > 0.f);
}

TEST_CASE("calibration records per-site extrema") {
  // dense identity keeps values visible at every site; relu site floor is 0
  ModelGraph m;
  m.input = {1, 1, 2};
  m.n_classes = 2;
  m.arch = "toy";
  m.layers.push_back(flatten_layer());
  Layer d1 = dense_layer(2, 2);
  d1.weights[0] = 1.f;
  d1.weights[3] = 1.f;
  m.layers.push_back(d1);
  m.layers.push_back(relu_layer());
  Layer d2 = dense_layer(2, 2);
  d2.weights[0] = 1.f;
  d2.weights[3] = 1.f;
  m.layers.push_back(d2);
  m.layers.push_back(softmax_layer());
  validate_model(m);

  Tensor data({3, 1, 1, 2}, {-1.2f, 0.4f, 3.7f, 2.0f, 0.1f, -0.5f});
  CalibrationStats st = calibrate_activation_ranges(m, data, 2);
  CHECK(st.n_batches == 2);
  CHECK(st.input.min == -1.2f);
  CHECK(st.input.max == 3.7f);
  CHECK(st.layer[2].min == 0.f);   // relu output
  CHECK(st.layer[2].max == 3.7f);
  CHECK(st.layer[3].min == 0.f);   // logits after relu-filtered identity
  CHECK(st.layer[3].max == 3.7f);

  SUBCASE("merge is the elementwise extrema monoid") {
    Tensor a = batch_slice(data, 0, 2).reshaped({2, 1, 1, 2});
    Tensor b = batch_slice(data, 2, 1).reshaped({1, 1, 1, 2});
    CalibrationStats sa = calibrate_activation_ranges(m, a, 2);
    CalibrationStats sb = calibrate_activation_ranges(m, b, 2);
    CalibrationStats merged = merge_stats(sa, sb);
    CHECK(merged.input.min == st.input.min);
    CHECK(merged.input.max == st.input.max);
    for (size_t i = 0; i < st.layer.size(); ++i) {
      CHECK(merged.layer[i].min == st.layer[i].min);
      CHECK(merged.layer[i].max == st.layer[i].max);
    }
  }
  SUBCASE("batch order does not matter") {
    Tensor flipped({3, 1, 1, 2}, {0.1f, -0.5f, -1.2f, 0.4f, 3.7f, 2.0f});
    CalibrationStats st2 = calibrate_activation_ranges(m, flipped, 2);
    CHECK(st2.input.min == st.input.min);
    CHECK(st2.input.max == st.input.max);
    for (size_t i = 0; i < st.layer.size(); ++i) {
      CHECK(st2.layer[i].min == st.layer[i].min);
      CHECK(st2.layer[i].max == st.layer[i].max);
    }
  }
  SUBCASE("rejects empty sets and quantized models") {
    CHECK_THROWS(calibrate_activation_ranges(m, Tensor({0, 1, 1, 2}), 2));
    ModelGraph q = quantize_model(m, st);
    CHECK_THROWS(calibrate_activation_ranges(q, data, 2));
  }
}

TEST_CASE("folding batchnorm reproduces the unfolded forward") {
  SUBCASE("after a conv") {
    ModelGraph m;
    m.input = {5, 5, 3};
    m.n_classes = 7;
    m.arch = "toy";
    m.layers.push_back(conv_layer(3, 3, 3, 4, 1, Padding::Same));
    m.layers.push_back(batchnorm_layer(4));
    m.layers.push_back(relu_layer());
    m.layers.push_back(flatten_layer());
    m.layers.push_back(dense_layer(100, 7));
    m.layers.push_back(softmax_layer());
    init_he(m, 5);
    randomize_bn(m, 6);
    ModelGraph f = fold_batchnorm(m);
    CHECK(f.layers.size() == m.layers.size() - 1);
    CHECK(f.layers[0].kind == LayerKind::Conv2D);
    Tensor x = random_tensor({2, 5, 5, 3}, 9, -1.f, 1.f);
    CHECK(rel_l2(forward(m, x), forward(f, x)) <= 1e-5);
  }
  SUBCASE("after a depthwise conv") {
    ModelGraph m;
    m.input = {5, 5, 3};
    m.n_classes = 5;
    m.arch = "toy";
    m.layers.push_back(dwconv_layer(3, 3, 3, 1, Padding::Same));
    m.layers.push_back(batchnorm_layer(3));
    m.layers.push_back(relu_layer());
    m.layers.push_back(flatten_layer());
    m.layers.push_back(dense_layer(75, 5));
    m.layers.push_back(softmax_layer());
    init_he(m, 15);
    randomize_bn(m, 16);
    ModelGraph f = fold_batchnorm(m);
    Tensor x = random_tensor({2, 5, 5, 3}, 19, -1.f, 1.f);
    CHECK(rel_l2(forward(m, x), forward(f, x)) <= 1e-5);
  }
  SUBCASE("after a dense layer") {
    ModelGraph m;
    m.input = {1, 1, 6};
    m.n_classes = 4;
    m.arch = "toy";
    m.layers.push_back(flatten_layer());
    m.layers.push_back(dense_layer(6, 8));
    m.layers.push_back(batchnorm_layer(8));
    m.layers.push_back(relu_layer());
    m.layers.push_back(dense_layer(8, 4));
    m.layers.push_back(softmax_layer());
    init_he(m, 25);
    randomize_bn(m, 26);
    ModelGraph f = fold_batchnorm(m);
    Tensor x = random_tensor({3, 1, 1, 6}, 29, -1.f, 1.f);
    CHECK(rel_l2(forward(m, x), forward(f, x)) <= 1e-5);
  }
  SUBCASE("whole networks, including skip remapping") {
    ModelGraph m = build_mobilenetv2();
    init_he(m, 35);
    randomize_bn(m, 36);
    ModelGraph f = fold_batchnorm(m);
    for (const Layer& l : f.layers) CHECK(l.kind != LayerKind::BatchNorm);
    int adds = 0;
    for (const Layer& l : f.layers)
      if (l.kind == LayerKind::Add) {
        ++adds;
        CHECK(l.skip_src >= 0);
        LayerKind src = f.layers[size_t(l.skip_src)].kind;
        CHECK((src == LayerKind::Conv2D || src == LayerKind::Add));
      }
    CHECK(adds == 10);
    Tensor x = random_tensor({2, 32, 32, 3}, 39, 0.f, 1.f);
    CHECK(rel_l2(forward(m, x), forward(f, x)) <= 1e-4);

    ModelGraph c = build_cnn_svhn(0.25f);
    init_he(c, 45);
    randomize_bn(c, 46);
    ModelGraph cf = fold_batchnorm(c);
    Tensor cx = random_tensor({2, 32, 32, 3}, 49, 0.f, 1.f);
    CHECK(rel_l2(forward(c, cx), forward(cf, cx)) <= 1e-4);
  }
}

TEST_CASE("activation sites skip layers that feed relu and shape-only layers") {
  ModelGraph f = fold_batchnorm(build_cnn_svhn(0.25f));
  std::vector<bool> site = activation_sites(f);
  for (size_t i = 0; i < f.layers.size(); ++i) {
    LayerKind k = f.layers[i].kind;
    LayerKind next = i + 1 < f.layers.size() ? f.layers[i + 1].kind : LayerKind::Softmax;
    bool expect;
    switch (k) {
      case LayerKind::Conv2D:
      case LayerKind::Dense:
        expect = next != LayerKind::ReLU;
        break;
      case LayerKind::ReLU:
        expect = true;
        break;
      default:
        expect = false;
    }
    CHECK(site[i] == expect);
  }
  // every conv here is conv->relu, so sites are exactly relus plus the logits
  int n_sites = int(std::count(site.begin(), site.end(), true));
  int n_relu = 0;
  for (const Layer& l : f.layers) n_relu += l.kind == LayerKind::ReLU;
  CHECK(n_sites == n_relu + 1);
}

TEST_CASE("quantize_model snaps weights, annotates sites and is idempotent") {
  ModelGraph m = build_cnn_svhn(0.25f);
  init_he(m, 55);
  randomize_bn(m, 56);
  Tensor calib = random_tensor({8, 32, 32, 3}, 57, 0.f, 1.f);
  CalibrationStats st = calibrate_activation_ranges(m, calib, 4);
  ModelGraph q1 = quantize_model(m, st);

  CHECK(q1.quantized);
  CHECK(q1.input_qp.has_value());
  for (const Layer& l : q1.layers) {
    CHECK(l.kind != LayerKind::BatchNorm);
    if (!l.has_weights()) continue;
    REQUIRE(l.weight_qp.has_value());
    for (int64_t i = 0; i < l.weights.numel(); ++i) {
      float code = l.weights[i] / l.weight_qp->scale;
      CHECK(std::abs(code - round_half_away(code)) <= 1e-2f);
      CHECK(std::abs(code) <= 127.5f);
    }
  }

  ModelGraph q2 = quantize_model(q1, st);
  REQUIRE(q2.layers.size() == q1.layers.size());
  for (size_t i = 0; i < q1.layers.size(); ++i) {
    const Layer &a = q1.layers[i], &b = q2.layers[i];
    CHECK(a.kind == b.kind);
    if (a.has_weights()) {
      CHECK(max_abs_diff(a.weights, b.weights) == 0.f);
      CHECK(max_abs_diff(a.bias, b.bias) == 0.f);
      CHECK(a.weight_qp->scale == b.weight_qp->scale);
    }
    CHECK(a.out_qp.has_value() == b.out_qp.has_value());
    if (a.out_qp) {
      CHECK(a.out_qp->scale == b.out_qp->scale);
      CHECK(a.out_qp->zero_point == b.out_qp->zero_point);
    }
  }
  CHECK(q1.input_qp->scale == q2.input_qp->scale);
  Tensor x = random_tensor({2, 32, 32, 3}, 59, 0.f, 1.f);
  CHECK(max_abs_diff(forward(q1, x, ForwardMode::FakeQuant), forward(q2, x, ForwardMode::FakeQuant)) ==
        0.f);

  SUBCASE("fake-quant logits track the float logits") {
    Tensor lf = forward(m, x);
    Tensor lq = forward(q1, x, ForwardMode::FakeQuant);
    lq.require_finite("fake-quant logits");
    CHECK(rel_l2(lf, lq) < 0.15);
  }
  SUBCASE("stats of the wrong shape are rejected") {
    CalibrationStats bad = st;
    bad.layer.pop_back();
    CHECK_THROWS(quantize_model(m, bad));
    CHECK_THROWS(quantize_model(m, CalibrationStats{}));
  }
}

TEST_CASE("grid-aligned identity dense matches float forward") {
  ModelGraph m = identity_dense_model(4);
  Tensor calib({2, 1, 1, 4}, {0.f, 0.25f, 0.5f, 1.f, 0.1f, 0.9f, 0.3f, 0.7f});
  CalibrationStats st = calibrate_activation_ranges(m, calib, 2);
  ModelGraph q = quantize_model(m, st);
  REQUIRE(q.input_qp.has_value());
  float s = q.input_qp->scale;
  Tensor x({1, 1, 1, 4}, {s * 10.f, s * 100.f, s * 200.f, s * 255.f});
  Tensor lf = forward(m, x);
  Tensor lq = forward(q, x, ForwardMode::FakeQuant);
  CHECK(max_abs_diff(lf, lq) <= 1e-6f);
}

TEST_CASE("straight-through gradient passes inside the grid range and dies outside") {
  SUBCASE("scalar quantize-dequantize against coarse finite differences") {
    QuantParams qp = activation_qparams(0.f, 2.55f);
    auto qdq = [&](double v) { return double(fake_quant_value(float(v), qp)); };
    double h = 0.1;
    double inside = oracle::finite_difference(qdq, 1.0, h);
    CHECK(std::abs(inside - 1.0) <= 0.06);
    double outside = oracle::finite_difference(qdq, 3.5, h);
    CHECK(outside == 0.0);
    double below = oracle::finite_difference(qdq, -1.0, h);
    CHECK(below == 0.0);
  }

  // diagonal 0.5 keeps every interior value well away from site boundaries
  ModelGraph m = identity_dense_model(3);
  for (Layer& l : m.layers)
    if (l.kind == LayerKind::Dense)
      for (int64_t i = 0; i < l.weights.numel(); ++i) l.weights[i] *= 0.5f;
  Tensor calib({2, 1, 1, 3}, {0.f, 0.5f, 2.5f, 0.2f, 0.8f, 0.4f});
  CalibrationStats st = calibrate_activation_ranges(m, calib, 2);
  ModelGraph q = quantize_model(m, st);
  float s = q.input_qp->scale;
  // coordinate 2 sits past the calibrated range, the others on grid points
  Tensor x({1, 1, 1, 3}, {s * 50.f, s * 200.f, q.input_qp->real_max() + 0.7f});
  Tensor xq = fake_quant(x, *q.input_qp);
  std::vector<int> labels = {0};

  Tensor gx = input_gradient(q, x, labels, ForwardMode::FakeQuant);
  Tensor gq = input_gradient(q, xq, labels, ForwardMode::FakeQuant);
  CHECK(gx[2] == 0.f);
  CHECK(gx[0] == gq[0]);
  CHECK(gx[1] == gq[1]);
  CHECK(gx[0] != 0.f);

  // same input against a wider grid that reaches coordinate 2: the zero above
  // really came from the range mask
  Tensor calib_wide = calib;
  calib_wide[2] = 5.f;
  CalibrationStats st_wide = calibrate_activation_ranges(m, calib_wide, 2);
  ModelGraph q_wide = quantize_model(m, st_wide);
  Tensor g_wide = input_gradient(q_wide, x, labels, ForwardMode::FakeQuant);
  CHECK(g_wide[2] != 0.f);

  SUBCASE("coarse finite differences through the whole model agree inside") {
    double h = 5.0 * double(s);
    auto loss_at = [&](double v) {
      Tensor xp = x;
      xp[0] = float(v);
      return forward_loss(q, xp, labels, ForwardMode::FakeQuant, 0, false);
    };
    double fd = oracle::finite_difference(loss_at, double(x[0]), h);
    CHECK(std::abs(fd - double(gx[0])) <= 0.15 * std::abs(double(gx[0])) + 1e-6);
  }
}
