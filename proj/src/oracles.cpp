#include "sshield/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "sshield/layers.hpp"

namespace sshield::oracle {

double finite_difference(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

Tensor conv2d_naive(const Tensor& x, const Tensor& w, const Tensor& b, int stride, bool same_pad) {
  const int N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const int KH = w.dim(0), KW = w.dim(1), Cout = w.dim(3);
  Padding pad = same_pad ? Padding::Same : Padding::Valid;
  int pad_h = 0, pad_w = 0, pt;
  if (same_pad) {
    same_pad_amounts(H, KH, stride, &pad_h, &pt);
    same_pad_amounts(W, KW, stride, &pad_w, &pt);
  }
  const int OH = conv_out_dim(H, KH, stride, pad);
  const int OW = conv_out_dim(W, KW, stride, pad);
  Tensor y({N, OH, OW, Cout});
  for (int n = 0; n < N; ++n)
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow)
        for (int co = 0; co < Cout; ++co) {
          float acc = b.numel() ? b[co] : 0.f;
          for (int kh = 0; kh < KH; ++kh)
            for (int kw = 0; kw < KW; ++kw) {
              int ih = oh * stride - pad_h + kh;
              int iw = ow * stride - pad_w + kw;
              if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
              for (int ci = 0; ci < C; ++ci)
                acc += x[((int64_t(n) * H + ih) * W + iw) * C + ci] *
                       w[((int64_t(kh) * KW + kw) * C + ci) * Cout + co];
            }
          y[((int64_t(n) * OH + oh) * OW + ow) * Cout + co] = acc;
        }
  return y;
}

Tensor median_smooth_naive(const Tensor& x, int win_h, int win_w) {
  const int N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  Tensor y(x.shape());
  std::vector<float> window;
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w)
        for (int c = 0; c < C; ++c) {
          window.clear();
          for (int i = 0; i < win_h; ++i)
            for (int j = 0; j < win_w; ++j) {
              int ih = std::min(h + i, H - 1);  // replicate bottom/right edge
              int iw = std::min(w + j, W - 1);
              window.push_back(x[((int64_t(n) * H + ih) * W + iw) * C + c]);
            }
          std::sort(window.begin(), window.end());
          size_t k = window.size();
          float med = (k % 2 == 1) ? window[k / 2] : 0.5f * (window[k / 2 - 1] + window[k / 2]);
          y[((int64_t(n) * H + h) * W + w) * C + c] = med;
        }
  return y;
}

double ece_naive(const std::vector<float>& confidence, const std::vector<unsigned char>& correct,
                 int n_bins) {
  if (confidence.size() != correct.size()) throw std::invalid_argument("ece_naive: size mismatch");
  const size_t n = confidence.size();
  if (n == 0) return 0.0;
  double ece = 0.0;
  for (int m = 1; m <= n_bins; ++m) {
    double lo = double(m - 1) / n_bins, hi = double(m) / n_bins;
    double conf_sum = 0.0, acc_sum = 0.0;
    int64_t count = 0;
    for (size_t i = 0; i < n; ++i) {
      double cf = confidence[i];
      bool in_bin = (m == 1) ? (cf <= hi) : (cf > lo && cf <= hi);
      if (!in_bin) continue;
      ++count;
      conf_sum += cf;
      acc_sum += correct[i] ? 1.0 : 0.0;
    }
    if (count == 0) continue;
    ece += (double(count) / double(n)) * std::abs(acc_sum / count - conf_sum / count);
  }
  return ece;
}

GradCheckResult gradient_check(const ModelGraph& m, const Tensor& x, const std::vector<int>& labels,
                               float h, double tol, double min_frac, ForwardMode mode, uint64_t seed,
                               double denom_floor, bool bn_batch_stats) {
  BackwardOptions opts;
  opts.input_grad = true;
  opts.param_grads = true;
  opts.bn_batch_stats = bn_batch_stats;
  BackwardResult an = run_backward(m, x, labels, mode, seed, opts);
  Tensor fd_in = finite_difference_input_gradient(m, x, labels, h, mode, seed, bn_batch_stats);
  ParamGrads fd_par = finite_difference_parameter_gradients(m, x, labels, h, mode, seed, bn_batch_stats);

  GradCheckResult res;
  int64_t ok = 0;
  auto compare = [&](const Tensor& a, const Tensor& b) {
    for (int64_t i = 0; i < a.numel(); ++i) {
      double av = a[i], bv = b[i];
      double rel = std::abs(av - bv) / std::max({std::abs(av), std::abs(bv), denom_floor});
      res.max_rel_err = std::max(res.max_rel_err, rel);
      ++res.n_coords;
      if (rel <= tol) ++ok;
    }
  };
  compare(an.input_grad, fd_in);
  for (size_t i = 0; i < m.layers.size(); ++i) {
    if (!an.param_grads.dweights[i].empty()) compare(an.param_grads.dweights[i], fd_par.dweights[i]);
    if (!an.param_grads.dbias[i].empty()) compare(an.param_grads.dbias[i], fd_par.dbias[i]);
    if (!an.param_grads.dgamma[i].empty()) compare(an.param_grads.dgamma[i], fd_par.dgamma[i]);
    if (!an.param_grads.dbeta[i].empty()) compare(an.param_grads.dbeta[i], fd_par.dbeta[i]);
  }
  res.frac_within = res.n_coords ? double(ok) / double(res.n_coords) : 1.0;
  res.pass = res.frac_within >= min_frac;
  return res;
}

}  // namespace sshield::oracle
