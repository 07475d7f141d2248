#include "sshield/quantize.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "sshield/autodiff.hpp"
#include "sshield/linalg.hpp"

namespace sshield {

QuantParams weight_qparams(const Tensor& w) {
  if (w.numel() == 0) throw std::invalid_argument("weight_qparams: empty tensor");
  w.require_finite("weight tensor");
  float m = ConstVecMap(w.data(), w.numel()).cwiseAbs().maxCoeff();
  QuantParams qp;
  qp.symmetric = true;
  qp.zero_point = 0;
  qp.scale = m > 0.f ? m / 127.f : 1.f;
  return qp;
}

QuantParams activation_qparams(float observed_min, float observed_max) {
  if (!std::isfinite(observed_min) || !std::isfinite(observed_max) || observed_min > observed_max)
    throw std::invalid_argument("activation_qparams: bad range");
  double lo = std::min<double>(observed_min, 0.0);
  double hi = std::max<double>(observed_max, 0.0);
  QuantParams qp;
  qp.symmetric = false;
  if (hi == lo) {  // constant-zero site
    qp.scale = 1.f;
    qp.zero_point = 0;
    return qp;
  }
  double s0 = (hi - lo) / 255.0;
  int zp = int(std::lround(-lo / s0));
  // both sides of a mixed range need at least one code
  zp = std::clamp(zp, lo < 0.0 ? 1 : 0, hi > 0.0 ? 254 : 255);
  double s = 0.0;
  if (zp > 0) s = std::max(s, lo / double(0 - zp));
  if (zp < 255) s = std::max(s, hi / double(255 - zp));
  float sf = std::max(float(s), 1e-20f);
  // float rounding may leave the grid a hair short of the extrema; widen
  // until [real_min, real_max] really covers them
  auto covers = [&](float sc) {
    return sc * float(0 - zp) <= float(lo) && sc * float(255 - zp) >= float(hi);
  };
  while (!covers(sf)) sf = std::nextafterf(sf, std::numeric_limits<float>::infinity());
  qp.scale = sf;
  qp.zero_point = zp;
  return qp;
}

QuantizedTensor quantize_tensor(const Tensor& x, const QuantParams& qp) {
  if (!(qp.scale > 0.f)) throw std::invalid_argument("quantize_tensor: scale must be positive");
  QuantizedTensor out{Tensor(x.shape()), Tensor(x.shape())};
  const float* in = x.data();
  float* q = out.q.data();
  float* dq = out.dequant.data();
  const float zp = float(qp.zero_point);
  for (int64_t i = 0; i < x.numel(); ++i) {
    q[i] = quantize_value(in[i], qp);
    dq[i] = qp.scale * (q[i] - zp);
  }
  return out;
}

Tensor fake_quant(const Tensor& x, const QuantParams& qp) {
  if (!(qp.scale > 0.f)) throw std::invalid_argument("fake_quant: scale must be positive");
  Tensor out(x.shape());
  const float* in = x.data();
  float* o = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) o[i] = fake_quant_value(in[i], qp);
  return out;
}

static SiteRange merge_range(SiteRange a, SiteRange b) {
  SiteRange r;
  r.min = std::min(a.min, b.min);
  r.max = std::max(a.max, b.max);
  return r;
}

CalibrationStats merge_stats(const CalibrationStats& a, const CalibrationStats& b) {
  if (a.n_batches == 0) return b;
  if (b.n_batches == 0) return a;
  if (a.layer.size() != b.layer.size())
    throw std::invalid_argument("merge_stats: stats from different graphs");
  CalibrationStats r;
  r.input = merge_range(a.input, b.input);
  r.layer.resize(a.layer.size());
  for (size_t i = 0; i < a.layer.size(); ++i) r.layer[i] = merge_range(a.layer[i], b.layer[i]);
  r.n_batches = a.n_batches + b.n_batches;
  return r;
}

namespace {

bool foldable_into(LayerKind k) {
  return k == LayerKind::Conv2D || k == LayerKind::DepthwiseConv2D || k == LayerKind::Dense;
}

// Scales the weights of `target` per output channel and rewrites its bias.
void absorb_bn(Layer& target, const Layer& bn) {
  const int C = bn.gamma.dim(0);
  const size_t n_ch = static_cast<size_t>(C);
  std::vector<double> a(n_ch);
  std::vector<double> shift(n_ch);
  for (int c = 0; c < C; ++c) {
    double inv = bn.gamma[c] / std::sqrt(double(bn.running_var[c]) + kBatchNormEps);
    a[size_t(c)] = inv;
    shift[size_t(c)] = bn.beta[c] - inv * bn.running_mean[c];
  }
  float* w = target.weights.data();
  for (int64_t i = 0; i < target.weights.numel(); ++i)
    w[i] = float(w[i] * a[size_t(i % C)]);  // output channel is the innermost axis
  if (target.bias.numel() != C) target.bias = Tensor::zeros({C});
  float* b = target.bias.data();
  for (int c = 0; c < C; ++c) b[c] = float(b[c] * a[size_t(c)] + shift[size_t(c)]);
}

}  // namespace

ModelGraph fold_batchnorm(const ModelGraph& m) {
  ModelGraph out;
  out.input = m.input;
  out.n_classes = m.n_classes;
  out.arch = m.arch;
  out.quantized = m.quantized;
  out.input_qp = m.input_qp;

  int n = int(m.layers.size());
  std::vector<int> old_to_new(size_t(n), -1);
  std::vector<char> absorbed_bn(size_t(n), 0);
  for (int i = 0; i < n; ++i) {
    const Layer& l = m.layers[size_t(i)];
    if (l.kind == LayerKind::BatchNorm && i > 0 && foldable_into(m.layers[size_t(i - 1)].kind) &&
        old_to_new[size_t(i - 1)] == int(out.layers.size()) - 1) {
      absorb_bn(out.layers.back(), l);
      old_to_new[size_t(i)] = int(out.layers.size()) - 1;
      absorbed_bn[size_t(i - 1)] = 1;
      continue;
    }
    out.layers.push_back(l);
    old_to_new[size_t(i)] = int(out.layers.size()) - 1;
  }
  for (Layer& l : out.layers) {
    if (l.kind != LayerKind::Add) continue;
    int s = l.skip_src;
    if (s < 0 || s >= n) throw std::runtime_error("fold_batchnorm: bad skip index");
    // a skip reading the pre-BatchNorm value of a now-folded layer cannot be
    // represented in the folded graph
    if (absorbed_bn[size_t(s)]) throw std::runtime_error("fold_batchnorm: skip taps a pre-fold value");
    l.skip_src = old_to_new[size_t(s)];
  }
  validate_model(out);
  return out;
}

std::vector<bool> activation_sites(const ModelGraph& folded) {
  int n = int(folded.layers.size());
  std::vector<bool> site(size_t(n), false);
  for (int i = 0; i < n; ++i) {
    switch (folded.layers[size_t(i)].kind) {
      case LayerKind::Conv2D:
      case LayerKind::DepthwiseConv2D:
      case LayerKind::Dense:
      case LayerKind::BatchNorm:
      case LayerKind::GlobalAvgPool:
      case LayerKind::Add:
      case LayerKind::ReLU:
        site[size_t(i)] = true;
        break;
      default:
        break;
    }
    if (site[size_t(i)] && i + 1 < n) {
      LayerKind next = folded.layers[size_t(i + 1)].kind;
      if (next == LayerKind::ReLU || next == LayerKind::BatchNorm) site[size_t(i)] = false;
    }
  }
  return site;
}

CalibrationStats calibrate_activation_ranges(const ModelGraph& m, const Tensor& data,
                                             int batch_size) {
  if (m.quantized) throw std::invalid_argument("calibration needs the float model");
  if (data.rank() == 0 || data.numel() == 0 || data.shape()[0] == 0)
    throw std::invalid_argument("calibration set is empty");
  if (batch_size <= 0) throw std::invalid_argument("calibration batch size must be positive");

  ModelGraph folded = fold_batchnorm(m);
  CalibrationStats stats;
  stats.layer.resize(folded.layers.size());

  int N = data.shape()[0];
  for (int start = 0; start < N; start += batch_size) {
    int count = std::min(batch_size, N - start);
    Tensor xb = batch_slice(data, start, count);
    ComputeGraph tape;
    forward_tape(folded, xb, ForwardMode::Deterministic, 0, tape);
    auto observe = [](SiteRange& r, const Tensor& t) {
      ConstVecMap v(t.data(), t.numel());
      r.min = std::min(r.min, v.minCoeff());
      r.max = std::max(r.max, v.maxCoeff());
    };
    observe(stats.input, tape.nodes[0].value);
    for (size_t i = 0; i < folded.layers.size(); ++i)
      observe(stats.layer[i], tape.nodes[size_t(tape.layer_node[i])].value);
    ++stats.n_batches;
  }
  return stats;
}

ModelGraph quantize_model(const ModelGraph& m, const CalibrationStats& stats) {
  ModelGraph q = fold_batchnorm(m);
  if (stats.n_batches == 0 || stats.layer.size() != q.layers.size())
    throw std::invalid_argument("quantize_model: stats do not cover this model's sites");

  std::vector<bool> site = activation_sites(q);
  for (size_t i = 0; i < q.layers.size(); ++i) {
    Layer& l = q.layers[i];
    if (l.has_weights()) {
      // reuse a stored grid so requantizing is exact, not off by rounding
      QuantParams wqp = l.weight_qp ? *l.weight_qp : weight_qparams(l.weights);
      l.weights = quantize_tensor(l.weights, wqp).dequant;
      l.weight_qp = wqp;
    }
    if (site[i]) {
      const SiteRange& r = stats.layer[i];
      if (!(r.min <= r.max) || !std::isfinite(r.min) || !std::isfinite(r.max))
        throw std::invalid_argument("quantize_model: missing stats for layer " + std::to_string(i));
      l.out_qp = activation_qparams(r.min, r.max);
    } else {
      l.out_qp.reset();
    }
  }
  if (!(stats.input.min <= stats.input.max))
    throw std::invalid_argument("quantize_model: missing input stats");
  q.input_qp = activation_qparams(stats.input.min, stats.input.max);
  q.quantized = true;
  validate_model(q);
  return q;
}

}  // namespace sshield
