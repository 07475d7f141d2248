#include "sshield/layers.hpp"

#include <Eigen/Core>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "sshield/linalg.hpp"
#include "sshield/parallel.hpp"
#include "sshield/rng.hpp"

namespace sshield {

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv2D: return "conv2d";
    case LayerKind::DepthwiseConv2D: return "depthwise_conv2d";
    case LayerKind::Dense: return "dense";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::ReLU: return "relu";
    case LayerKind::MaxPool2D: return "maxpool2d";
    case LayerKind::GlobalAvgPool: return "global_avg_pool";
    case LayerKind::Dropout: return "dropout";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Softmax: return "softmax";
    case LayerKind::Add: return "add";
  }
  throw std::logic_error("unknown layer kind");
}

LayerKind layer_kind_from_name(const std::string& name) {
  for (int k = 0; k <= int(LayerKind::Add); ++k)
    if (name == layer_kind_name(LayerKind(k))) return LayerKind(k);
  throw std::invalid_argument("unknown layer kind '" + name + "'");
}

int64_t ModelGraph::parameter_count() const {
  int64_t n = 0;
  for (const Layer& l : layers) {
    n += l.weights.numel() + l.bias.numel();
    n += l.gamma.numel() + l.beta.numel();
  }
  return n;
}

Layer conv_layer(int kh, int kw, int cin, int cout, int stride, Padding pad) {
  Layer l{LayerKind::Conv2D};
  l.kernel_h = kh;
  l.kernel_w = kw;
  l.stride = stride;
  l.padding = pad;
  l.weights = Tensor({kh, kw, cin, cout});
  l.bias = Tensor({cout});
  return l;
}

Layer dwconv_layer(int kh, int kw, int c, int stride, Padding pad) {
  Layer l{LayerKind::DepthwiseConv2D};
  l.kernel_h = kh;
  l.kernel_w = kw;
  l.stride = stride;
  l.padding = pad;
  l.weights = Tensor({kh, kw, c});
  l.bias = Tensor({c});
  return l;
}

Layer dense_layer(int in, int out) {
  Layer l{LayerKind::Dense};
  l.weights = Tensor({in, out});
  l.bias = Tensor({out});
  return l;
}

Layer batchnorm_layer(int c) {
  Layer l{LayerKind::BatchNorm};
  l.gamma = Tensor::full({c}, 1.f);
  l.beta = Tensor({c});
  l.running_mean = Tensor({c});
  l.running_var = Tensor::full({c}, 1.f);
  return l;
}

Layer relu_layer() { return Layer{LayerKind::ReLU}; }

Layer maxpool_layer(int k, int stride) {
  Layer l{LayerKind::MaxPool2D};
  l.kernel_h = l.kernel_w = k;
  l.stride = stride > 0 ? stride : k;
  return l;
}

Layer gap_layer() { return Layer{LayerKind::GlobalAvgPool}; }

Layer dropout_layer(float rate) {
  if (rate < 0.f || rate >= 1.f) throw std::invalid_argument("dropout rate must be in [0,1)");
  Layer l{LayerKind::Dropout};
  l.rate = rate;
  return l;
}

Layer flatten_layer() { return Layer{LayerKind::Flatten}; }
Layer softmax_layer() { return Layer{LayerKind::Softmax}; }

Layer add_layer(int skip_src) {
  Layer l{LayerKind::Add};
  l.skip_src = skip_src;
  return l;
}

void same_pad_amounts(int in, int k, int stride, int* pad_before, int* pad_total) {
  int out = (in + stride - 1) / stride;
  int total = std::max(0, (out - 1) * stride + k - in);
  *pad_before = total / 2;
  *pad_total = total;
}

int conv_out_dim(int in, int k, int stride, Padding pad) {
  if (pad == Padding::Same) return (in + stride - 1) / stride;
  if (in < k) throw std::invalid_argument("valid conv: input smaller than kernel");
  return (in - k) / stride + 1;
}

// --- conv2d ----------------------------------------------------------------

namespace {

// Patch matrix for one sample: rows = output positions, cols = kh*kw*c.
// Out-of-range taps are zeros (Same padding).
void im2col_sample(const float* x, int H, int W, int C, int KH, int KW, int stride, int pad_h, int pad_w,
                   int OH, int OW, float* col) {
  const int row_len = KH * KW * C;
  for (int oh = 0; oh < OH; ++oh) {
    for (int ow = 0; ow < OW; ++ow) {
      float* row = col + (int64_t(oh) * OW + ow) * row_len;
      for (int kh = 0; kh < KH; ++kh) {
        int ih = oh * stride - pad_h + kh;
        float* dst = row + kh * KW * C;
        if (ih < 0 || ih >= H) {
          std::memset(dst, 0, sizeof(float) * size_t(KW) * C);
          continue;
        }
        for (int kw = 0; kw < KW; ++kw) {
          int iw = ow * stride - pad_w + kw;
          if (iw < 0 || iw >= W)
            std::memset(dst + kw * C, 0, sizeof(float) * size_t(C));
          else
            std::memcpy(dst + kw * C, x + (int64_t(ih) * W + iw) * C, sizeof(float) * size_t(C));
        }
      }
    }
  }
}

thread_local std::vector<float> t_col_scratch;

void require_nhwc(const Tensor& x, const char* op) {
  if (x.rank() != 4) throw std::invalid_argument(std::string(op) + ": expected NHWC input, got " + shape_str(x.shape()));
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, Padding pad) {
  require_nhwc(x, "conv2d");
  if (w.rank() != 4) throw std::invalid_argument("conv2d: weights must be [kh,kw,cin,cout]");
  const int N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const int KH = w.dim(0), KW = w.dim(1), Cout = w.dim(3);
  if (w.dim(2) != C)
    throw std::invalid_argument("conv2d: input channels " + std::to_string(C) + " != weight channels " +
                                std::to_string(w.dim(2)));
  if (b.numel() != Cout) throw std::invalid_argument("conv2d: bias length != cout");

  int pad_h = 0, pad_w = 0, pt;
  if (pad == Padding::Same) {
    same_pad_amounts(H, KH, stride, &pad_h, &pt);
    same_pad_amounts(W, KW, stride, &pad_w, &pt);
  }
  const int OH = conv_out_dim(H, KH, stride, pad);
  const int OW = conv_out_dim(W, KW, stride, pad);
  const int row_len = KH * KW * C;

  Tensor y({N, OH, OW, Cout});
  parallel_for(N, [&](int, int64_t s0, int64_t s1) {
    t_col_scratch.resize(size_t(OH) * OW * row_len);
    float* col = t_col_scratch.data();
    for (int64_t s = s0; s < s1; ++s) {
      const float* xs = x.data() + s * H * W * C;
      float* ys = y.data() + s * OH * OW * Cout;
      im2col_sample(xs, H, W, C, KH, KW, stride, pad_h, pad_w, OH, OW, col);
      matmul(col, w.data(), ys, OH * OW, row_len, Cout);
      MatMap out(ys, OH * OW, Cout);
      out.rowwise() += ConstVecMap(b.data(), Cout).transpose();
    }
  });
  return y;
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, Padding pad) {
  require_nhwc(x, "depthwise_conv2d");
  if (w.rank() != 3) throw std::invalid_argument("depthwise_conv2d: weights must be [kh,kw,c]");
  const int N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const int KH = w.dim(0), KW = w.dim(1);
  if (w.dim(2) != C) throw std::invalid_argument("depthwise_conv2d: channel mismatch");
  if (b.numel() != C) throw std::invalid_argument("depthwise_conv2d: bias length != channels");

  int pad_h = 0, pad_w = 0, pt;
  if (pad == Padding::Same) {
    same_pad_amounts(H, KH, stride, &pad_h, &pt);
    same_pad_amounts(W, KW, stride, &pad_w, &pt);
  }
  const int OH = conv_out_dim(H, KH, stride, pad);
  const int OW = conv_out_dim(W, KW, stride, pad);

  Tensor y({N, OH, OW, C});
  parallel_for(N, [&](int, int64_t s0, int64_t s1) {
    for (int64_t s = s0; s < s1; ++s) {
      const float* xs = x.data() + s * H * W * C;
      float* ys = y.data() + s * OH * OW * C;
      for (int oh = 0; oh < OH; ++oh) {
        for (int ow = 0; ow < OW; ++ow) {
          float* out = ys + (int64_t(oh) * OW + ow) * C;
          Eigen::Map<Eigen::ArrayXf> acc(out, C);
          acc = Eigen::Map<const Eigen::ArrayXf>(b.data(), C);
          for (int kh = 0; kh < KH; ++kh) {
            int ih = oh * stride - pad_h + kh;
            if (ih < 0 || ih >= H) continue;
            for (int kw = 0; kw < KW; ++kw) {
              int iw = ow * stride - pad_w + kw;
              if (iw < 0 || iw >= W) continue;
              acc += Eigen::Map<const Eigen::ArrayXf>(w.data() + (int64_t(kh) * KW + kw) * C, C) *
                     Eigen::Map<const Eigen::ArrayXf>(xs + (int64_t(ih) * W + iw) * C, C);
            }
          }
        }
      }
    }
  });
  return y;
}

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2) throw std::invalid_argument("dense: expected [N,F] input, got " + shape_str(x.shape()));
  if (w.rank() != 2 || x.dim(1) != w.dim(0))
    throw std::invalid_argument("dense: input features " + std::to_string(x.dim(1)) + " != weight rows " +
                                std::to_string(w.rank() == 2 ? w.dim(0) : -1));
  const int N = x.dim(0), In = w.dim(0), Out = w.dim(1);
  if (b.numel() != Out) throw std::invalid_argument("dense: bias length != out");
  Tensor y({N, Out});
  parallel_for(N, [&](int, int64_t s0, int64_t s1) {
    for (int64_t s = s0; s < s1; ++s) {
      matmul(x.data() + s * In, w.data(), y.data() + s * Out, 1, In, Out);
      VecMap(y.data() + s * Out, Out) += ConstVecMap(b.data(), Out);
    }
  });
  return y;
}

Tensor relu(const Tensor& x) {
  Tensor y(x.shape());
  const float* in = x.data();
  float* out = y.data();
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = in[i] > 0.f ? in[i] : 0.f;
  return y;
}

Tensor maxpool2d(const Tensor& x, int kh, int kw, int stride, Tensor* argmax_out) {
  require_nhwc(x, "maxpool2d");
  const int N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  if (H < kh || W < kw) throw std::invalid_argument("maxpool2d: input smaller than window");
  const int OH = (H - kh) / stride + 1;
  const int OW = (W - kw) / stride + 1;
  Tensor y({N, OH, OW, C});
  if (argmax_out) *argmax_out = Tensor({N, OH, OW, C});
  parallel_for(N, [&](int, int64_t s0, int64_t s1) {
    for (int64_t s = s0; s < s1; ++s) {
      const float* xs = x.data() + s * H * W * C;
      float* ys = y.data() + s * OH * OW * C;
      float* as = argmax_out ? argmax_out->data() + s * OH * OW * C : nullptr;
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow)
          for (int c = 0; c < C; ++c) {
            float best = -std::numeric_limits<float>::infinity();
            int64_t best_idx = 0;
            for (int i = 0; i < kh; ++i)
              for (int j = 0; j < kw; ++j) {
                int64_t idx = (int64_t(oh * stride + i) * W + (ow * stride + j)) * C + c;
                // first maximum wins on ties (fixed scan order)
                if (xs[idx] > best) {
                  best = xs[idx];
                  best_idx = idx;
                }
              }
            int64_t o = (int64_t(oh) * OW + ow) * C + c;
            ys[o] = best;
            if (as) as[o] = float(best_idx);
          }
    }
  });
  return y;
}

Tensor global_avg_pool(const Tensor& x) {
  require_nhwc(x, "global_avg_pool");
  const int N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  Tensor y({N, C});
  const float inv = 1.f / float(H * W);
  for (int s = 0; s < N; ++s) {
    Eigen::Map<Eigen::ArrayXf> acc(y.data() + int64_t(s) * C, C);
    acc.setZero();
    const float* xs = x.data() + int64_t(s) * H * W * C;
    for (int p = 0; p < H * W; ++p) acc += Eigen::Map<const Eigen::ArrayXf>(xs + int64_t(p) * C, C);
    acc *= inv;
  }
  return y;
}

Tensor batchnorm_inference(const Tensor& x, const Layer& bn) {
  if (x.rank() != 4 && x.rank() != 2)
    throw std::invalid_argument("batchnorm: expected NHWC or [N,C] input");
  const int C = x.dim(x.rank() - 1);
  if (bn.gamma.numel() != C)
    throw std::invalid_argument("batchnorm: channels " + std::to_string(C) + " != params " +
                                std::to_string(bn.gamma.numel()));
  std::vector<float> a(static_cast<size_t>(C));
  std::vector<float> b(static_cast<size_t>(C));
  for (int c = 0; c < C; ++c) {
    float inv_std = 1.f / std::sqrt(bn.running_var[c] + kBatchNormEps);
    a[size_t(c)] = bn.gamma[c] * inv_std;
    b[size_t(c)] = bn.beta[c] - a[size_t(c)] * bn.running_mean[c];
  }
  Tensor y(x.shape());
  const int64_t rows = x.numel() / C;
  Eigen::Map<const Eigen::ArrayXf> av(a.data(), C), bv(b.data(), C);
  for (int64_t r = 0; r < rows; ++r)
    Eigen::Map<Eigen::ArrayXf>(y.data() + r * C, C) =
        av * Eigen::Map<const Eigen::ArrayXf>(x.data() + r * C, C) + bv;
  return y;
}

Tensor dropout_apply(const Tensor& x, float rate, uint64_t seed, Tensor* mask_out) {
  if (rate < 0.f || rate >= 1.f) throw std::invalid_argument("dropout rate must be in [0,1)");
  Tensor y(x.shape());
  if (mask_out) *mask_out = Tensor(x.shape());
  if (rate == 0.f) {
    y = x;
    if (mask_out) mask_out->fill(1.f);
    return y;
  }
  const int N = x.rank() >= 2 ? x.dim(0) : 1;
  const int64_t per = x.numel() / N;
  const float keep_scale = 1.f / (1.f - rate);
  // Mask stream is per sample so results do not depend on how a batch is
  // chunked across threads.
  parallel_for(N, [&](int, int64_t s0, int64_t s1) {
    for (int64_t s = s0; s < s1; ++s) {
      RandomStream rs(derive_seed(seed, uint64_t(s)));
      const float* in = x.data() + s * per;
      float* out = y.data() + s * per;
      float* mk = mask_out ? mask_out->data() + s * per : nullptr;
      for (int64_t i = 0; i < per; ++i) {
        float m = rs.uniform() < rate ? 0.f : keep_scale;
        out[i] = in[i] * m;
        if (mk) mk[i] = m;
      }
    }
  });
  return y;
}

Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw std::invalid_argument("softmax: expected [N,K] logits");
  const int N = logits.dim(0), K = logits.dim(1);
  Tensor p({N, K});
  for (int s = 0; s < N; ++s) {
    const float* in = logits.data() + int64_t(s) * K;
    float* out = p.data() + int64_t(s) * K;
    float mx = in[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, in[k]);
    float sum = 0.f;
    for (int k = 0; k < K; ++k) {
      out[k] = std::exp(in[k] - mx);
      sum += out[k];
    }
    float inv = 1.f / sum;
    for (int k = 0; k < K; ++k) out[k] *= inv;
  }
  return p;
}

// --- shape inference -------------------------------------------------------

std::vector<std::vector<int>> infer_shapes(const ModelGraph& m, int n) {
  if (m.input.h <= 0 || m.input.w <= 0 || m.input.c <= 0)
    throw std::invalid_argument("model input spec not set");
  std::vector<std::vector<int>> shapes;
  std::vector<int> cur = {n, m.input.h, m.input.w, m.input.c};
  auto channels = [](const std::vector<int>& s) { return s.back(); };
  for (size_t i = 0; i < m.layers.size(); ++i) {
    const Layer& l = m.layers[i];
    std::string where = "layer " + std::to_string(i) + " (" + layer_kind_name(l.kind) + ")";
    switch (l.kind) {
      case LayerKind::Conv2D: {
        if (cur.size() != 4) throw std::invalid_argument(where + ": needs NHWC input");
        if (l.weights.dim(2) != channels(cur))
          throw std::invalid_argument(where + ": expects " + std::to_string(l.weights.dim(2)) +
                                      " input channels, got " + std::to_string(channels(cur)));
        cur = {cur[0], conv_out_dim(cur[1], l.kernel_h, l.stride, l.padding),
               conv_out_dim(cur[2], l.kernel_w, l.stride, l.padding), l.weights.dim(3)};
        break;
      }
      case LayerKind::DepthwiseConv2D: {
        if (cur.size() != 4) throw std::invalid_argument(where + ": needs NHWC input");
        if (l.weights.dim(2) != channels(cur))
          throw std::invalid_argument(where + ": channel mismatch");
        cur = {cur[0], conv_out_dim(cur[1], l.kernel_h, l.stride, l.padding),
               conv_out_dim(cur[2], l.kernel_w, l.stride, l.padding), channels(cur)};
        break;
      }
      case LayerKind::Dense: {
        if (cur.size() != 2) throw std::invalid_argument(where + ": needs [N,F] input (flatten first?)");
        if (l.weights.dim(0) != cur[1])
          throw std::invalid_argument(where + ": expects " + std::to_string(l.weights.dim(0)) +
                                      " features, got " + std::to_string(cur[1]));
        cur = {cur[0], l.weights.dim(1)};
        break;
      }
      case LayerKind::BatchNorm: {
        if (l.gamma.numel() != channels(cur)) throw std::invalid_argument(where + ": channel mismatch");
        break;
      }
      case LayerKind::ReLU:
      case LayerKind::Dropout:
        break;
      case LayerKind::MaxPool2D: {
        if (cur.size() != 4) throw std::invalid_argument(where + ": needs NHWC input");
        if (cur[1] < l.kernel_h || cur[2] < l.kernel_w)
          throw std::invalid_argument(where + ": input smaller than window");
        cur = {cur[0], (cur[1] - l.kernel_h) / l.stride + 1, (cur[2] - l.kernel_w) / l.stride + 1, cur[3]};
        break;
      }
      case LayerKind::GlobalAvgPool: {
        if (cur.size() != 4) throw std::invalid_argument(where + ": needs NHWC input");
        cur = {cur[0], cur[3]};
        break;
      }
      case LayerKind::Flatten: {
        int64_t f = 1;
        for (size_t d = 1; d < cur.size(); ++d) f *= cur[d];
        cur = {cur[0], int(f)};
        break;
      }
      case LayerKind::Softmax: {
        if (i + 1 != m.layers.size())
          throw std::invalid_argument(where + ": softmax must be the final layer");
        if (cur.size() != 2 || cur[1] != m.n_classes)
          throw std::invalid_argument(where + ": expects [N," + std::to_string(m.n_classes) + "] input");
        break;
      }
      case LayerKind::Add: {
        if (l.skip_src < 0 || size_t(l.skip_src) >= i)
          throw std::invalid_argument(where + ": skip_src " + std::to_string(l.skip_src) + " out of range");
        if (shapes[size_t(l.skip_src)] != cur)
          throw std::invalid_argument(where + ": operand shapes differ, " +
                                      shape_str(shapes[size_t(l.skip_src)]) + " vs " + shape_str(cur));
        break;
      }
    }
    shapes.push_back(cur);
  }
  return shapes;
}

void validate_model(const ModelGraph& m) {
  if (m.layers.empty()) throw std::invalid_argument("model has no layers");
  if (m.n_classes <= 1) throw std::invalid_argument("model n_classes must be >= 2");
  if (m.layers.back().kind != LayerKind::Softmax)
    throw std::invalid_argument("model must end with a softmax layer");
  int n_softmax = 0;
  for (const Layer& l : m.layers)
    if (l.kind == LayerKind::Softmax) ++n_softmax;
  if (n_softmax != 1) throw std::invalid_argument("model must contain exactly one softmax layer");
  infer_shapes(m, 1);
  for (size_t i = 0; i < m.layers.size(); ++i) {
    const Layer& l = m.layers[i];
    if (l.has_weights() && !l.weights.all_finite())
      throw std::runtime_error("non-finite weights in layer " + std::to_string(i));
  }
}

void init_he(ModelGraph& m, uint64_t seed) {
  for (size_t i = 0; i < m.layers.size(); ++i) {
    Layer& l = m.layers[i];
    if (!l.has_weights()) continue;
    int fan_in;
    if (l.kind == LayerKind::Conv2D)
      fan_in = l.kernel_h * l.kernel_w * l.weights.dim(2);
    else if (l.kind == LayerKind::DepthwiseConv2D)
      fan_in = l.kernel_h * l.kernel_w;
    else
      fan_in = l.weights.dim(0);
    float stddev = std::sqrt(2.f / float(fan_in));
    RandomStream rs(derive_seed(seed, uint64_t(i)));
    for (int64_t j = 0; j < l.weights.numel(); ++j) l.weights[j] = stddev * rs.normal();
    l.bias.fill(0.f);
  }
}

}  // namespace sshield
