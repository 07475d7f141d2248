#include "sshield/defense.hpp"

#include "sshield/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "sshield/quant_params.hpp"
#include "sshield/rng.hpp"

namespace sshield {

namespace {

constexpr int kSlice = 256;

void check_spec(const DefenseSpec& s) {
  if (s.no_bits < 1 || s.no_bits > 8) throw std::invalid_argument("no_bits must be in [1,8]");
  if (s.T < 1) throw std::invalid_argument("T must be >= 1");
  if (s.median_h < 1 || s.median_w < 1) throw std::invalid_argument("median window dims must be >= 1");
}

float window_median(float* buf, int k) {
  float* mid = buf + k / 2;
  std::nth_element(buf, mid, buf + k);
  if (k % 2 == 1) return *mid;
  float lo = *std::max_element(buf, mid);
  return 0.5f * (lo + *mid);
}

}  // namespace

DefenseSpec defense_preset(const std::string& name) {
  DefenseSpec s;
  if (name == "shield") return s;
  if (name == "vanilla") {
    s.use_input_filter = false;
    s.use_mc_dropout = false;
    s.T = 1;
    return s;
  }
  if (name == "if") {
    s.use_mc_dropout = false;
    s.T = 1;
    return s;
  }
  if (name == "mc5") {
    s.use_input_filter = false;
    s.T = 5;
    return s;
  }
  throw std::invalid_argument("unknown defense preset '" + name + "'");
}

std::string defense_name(const DefenseSpec& spec) {
  if (spec.use_input_filter && spec.use_mc_dropout) return "shield";
  if (spec.use_input_filter) return "if";
  if (spec.use_mc_dropout) return "mc";
  return "vanilla";
}

Tensor bit_depth_squeeze(const Tensor& x, int no_bits) {
  if (no_bits < 1 || no_bits > 8) throw std::invalid_argument("no_bits must be in [1,8]");
  const float levels = float((1 << no_bits) - 1);
  Tensor y(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    if (!(x[i] >= 0.f && x[i] <= 1.f))
      throw std::invalid_argument("bit_depth_squeeze input must lie in [0,1]");
    y[i] = round_half_away(x[i] * levels) / levels;
  }
  return y;
}

Tensor median_smooth(const Tensor& x, int win_h, int win_w) {
  if (x.rank() != 4) throw std::invalid_argument("median_smooth expects [N,H,W,C]");
  if (win_h < 1 || win_w < 1) throw std::invalid_argument("median window dims must be >= 1");
  const int N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  if (win_h > H || win_w > W) throw std::invalid_argument("median window larger than image");
  if (win_h == 1 && win_w == 1) return x;
  Tensor y(x.shape());
  const int k = win_h * win_w;
  std::vector<float> buf(static_cast<size_t>(k));
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w)
        for (int c = 0; c < C; ++c) {
          int p = 0;
          for (int i = 0; i < win_h; ++i) {
            const int ih = std::min(h + i, H - 1);
            for (int j = 0; j < win_w; ++j) {
              const int iw = std::min(w + j, W - 1);
              buf[size_t(p++)] = x[((int64_t(n) * H + ih) * W + iw) * C + c];
            }
          }
          y[((int64_t(n) * H + h) * W + w) * C + c] = window_median(buf.data(), k);
        }
  return y;
}

Tensor input_filter(const Tensor& x, const DefenseSpec& spec) {
  check_spec(spec);
  return median_smooth(bit_depth_squeeze(x, spec.no_bits), spec.median_h, spec.median_w);
}

PredictiveDistribution aggregate_passes(const Tensor& passes) {
  if (passes.rank() != 3) throw std::invalid_argument("aggregate_passes expects [T,N,K]");
  const int T = passes.dim(0), N = passes.dim(1), K = passes.dim(2);
  PredictiveDistribution out;
  out.passes = passes;
  out.mean = Tensor({N, K});
  for (int t = 0; t < T; ++t) {
    const float* p = passes.data() + int64_t(t) * N * K;
    for (int64_t i = 0; i < int64_t(N) * K; ++i) out.mean[i] += p[i];
  }
  const float inv_t = 1.f / float(T);
  for (int64_t i = 0; i < out.mean.numel(); ++i) out.mean[i] *= inv_t;
  out.predicted.resize(static_cast<size_t>(N));
  out.confidence.resize(static_cast<size_t>(N));
  for (int s = 0; s < N; ++s) {
    const float* row = out.mean.data() + int64_t(s) * K;
    int best = 0;
    for (int j = 1; j < K; ++j)
      if (row[j] > row[best]) best = j;
    out.predicted[size_t(s)] = best;
    out.confidence[size_t(s)] = row[best];
  }
  return out;
}

PredictiveDistribution mc_dropout_predict(const ModelGraph& m, const Tensor& x, int T,
                                          uint64_t base_seed, ForwardMode mode) {
  if (T < 1) throw std::invalid_argument("T must be >= 1");
  if (x.rank() != 4) throw std::invalid_argument("mc_dropout_predict expects [N,H,W,C]");
  const int N = x.dim(0), K = m.n_classes;
  Tensor passes({T, N, K});
  // Passes are independent given their derived seeds and each writes its own
  // slab, so running them on any number of threads changes nothing; the mean
  // is accumulated afterwards in pass order either way.
  parallel_for(T, [&](int, int64_t t_begin, int64_t t_end) {
    for (int64_t t = t_begin; t < t_end; ++t) {
      const uint64_t pass_seed = derive_seed(base_seed, uint64_t(t));
      float* dst = passes.data() + t * N * K;
      for (int from = 0, slice = 0; from < N; from += kSlice, ++slice) {
        const int count = std::min(kSlice, N - from);
        const uint64_t s = N <= kSlice ? pass_seed : derive_seed(pass_seed, uint64_t(slice));
        Tensor probs = softmax_rows(forward(m, batch_slice(x, from, count), mode, s));
        std::memcpy(dst + int64_t(from) * K, probs.data(), size_t(probs.numel()) * sizeof(float));
      }
    }
  });
  return aggregate_passes(passes);
}

PredictiveDistribution stochastic_shield_predict(const ModelGraph& m, const Tensor& x,
                                                 const DefenseSpec& spec) {
  check_spec(spec);
  Tensor filtered = spec.use_input_filter ? input_filter(x, spec) : x;
  if (spec.use_mc_dropout)
    return mc_dropout_predict(m, filtered, spec.T, spec.base_seed, natural_mode(m, true));
  return mc_dropout_predict(m, filtered, 1, spec.base_seed, natural_mode(m, false));
}

}  // namespace sshield
