#include "sshield/autodiff.hpp"

#include <Eigen/Core>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "sshield/linalg.hpp"
#include "sshield/parallel.hpp"
#include "sshield/rng.hpp"

namespace sshield {

ForwardMode natural_mode(const ModelGraph& m, bool stochastic) {
  if (m.quantized) return stochastic ? ForwardMode::FakeQuantStochastic : ForwardMode::FakeQuant;
  return stochastic ? ForwardMode::Stochastic : ForwardMode::Deterministic;
}

namespace {

using ArrMap = Eigen::Map<Eigen::ArrayXf>;
using ConstArrMap = Eigen::Map<const Eigen::ArrayXf>;

Tensor fake_quant_tensor(const Tensor& x, const QuantParams& qp) {
  Tensor y(x.shape());
  const float* in = x.data();
  float* out = y.data();
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = fake_quant_value(in[i], qp);
  return y;
}

// Batch mean/var per channel (biased), two-pass for stability.
void batch_moments(const Tensor& x, int C, Tensor* mean, Tensor* var) {
  const int64_t rows = x.numel() / C;
  *mean = Tensor({C});
  *var = Tensor({C});
  ArrMap mu(mean->data(), C), v(var->data(), C);
  for (int64_t r = 0; r < rows; ++r) mu += ConstArrMap(x.data() + r * C, C);
  mu /= float(rows);
  for (int64_t r = 0; r < rows; ++r) {
    auto d = ConstArrMap(x.data() + r * C, C) - mu;
    v += d * d;
  }
  v /= float(rows);
}

Tensor batchnorm_train_forward(const Tensor& x, const Layer& bn, const Tensor& mean, const Tensor& var) {
  const int C = bn.gamma.dim(0);
  const int64_t rows = x.numel() / C;
  Tensor y(x.shape());
  Eigen::ArrayXf inv_std = (ConstArrMap(var.data(), C) + kBatchNormEps).sqrt().inverse();
  Eigen::ArrayXf a = ConstArrMap(bn.gamma.data(), C) * inv_std;
  Eigen::ArrayXf b = ConstArrMap(bn.beta.data(), C) - a * ConstArrMap(mean.data(), C);
  for (int64_t r = 0; r < rows; ++r)
    ArrMap(y.data() + r * C, C) = a * ConstArrMap(x.data() + r * C, C) + b;
  return y;
}

struct ConvGeom {
  int N, H, W, C, KH, KW, Cout, OH, OW, pad_h, pad_w, stride, row_len;
};

ConvGeom conv_geom(const Tensor& x, const Layer& l) {
  ConvGeom g;
  g.N = x.dim(0);
  g.H = x.dim(1);
  g.W = x.dim(2);
  g.C = x.dim(3);
  g.KH = l.kernel_h;
  g.KW = l.kernel_w;
  g.Cout = l.kind == LayerKind::Conv2D ? l.weights.dim(3) : g.C;
  g.stride = l.stride;
  g.pad_h = g.pad_w = 0;
  int pt;
  if (l.padding == Padding::Same) {
    same_pad_amounts(g.H, g.KH, g.stride, &g.pad_h, &pt);
    same_pad_amounts(g.W, g.KW, g.stride, &g.pad_w, &pt);
  }
  g.OH = conv_out_dim(g.H, g.KH, g.stride, l.padding);
  g.OW = conv_out_dim(g.W, g.KW, g.stride, l.padding);
  g.row_len = g.KH * g.KW * g.C;
  return g;
}

void im2col_one(const float* x, const ConvGeom& g, float* col) {
  for (int oh = 0; oh < g.OH; ++oh)
    for (int ow = 0; ow < g.OW; ++ow) {
      float* row = col + (int64_t(oh) * g.OW + ow) * g.row_len;
      for (int kh = 0; kh < g.KH; ++kh) {
        int ih = oh * g.stride - g.pad_h + kh;
        float* dst = row + kh * g.KW * g.C;
        if (ih < 0 || ih >= g.H) {
          std::memset(dst, 0, sizeof(float) * size_t(g.KW) * g.C);
          continue;
        }
        for (int kw = 0; kw < g.KW; ++kw) {
          int iw = ow * g.stride - g.pad_w + kw;
          if (iw < 0 || iw >= g.W)
            std::memset(dst + kw * g.C, 0, sizeof(float) * size_t(g.C));
          else
            std::memcpy(dst + kw * g.C, x + (int64_t(ih) * g.W + iw) * g.C, sizeof(float) * size_t(g.C));
        }
      }
    }
}

void col2im_add_one(const float* dcol, const ConvGeom& g, float* dx) {
  for (int oh = 0; oh < g.OH; ++oh)
    for (int ow = 0; ow < g.OW; ++ow) {
      const float* row = dcol + (int64_t(oh) * g.OW + ow) * g.row_len;
      for (int kh = 0; kh < g.KH; ++kh) {
        int ih = oh * g.stride - g.pad_h + kh;
        if (ih < 0 || ih >= g.H) continue;
        for (int kw = 0; kw < g.KW; ++kw) {
          int iw = ow * g.stride - g.pad_w + kw;
          if (iw < 0 || iw >= g.W) continue;
          ArrMap(dx + (int64_t(ih) * g.W + iw) * g.C, g.C) += ConstArrMap(row + (kh * g.KW + kw) * g.C, g.C);
        }
      }
    }
}

thread_local std::vector<float> t_bwd_col, t_bwd_dcol;

int count_kind(const ModelGraph& m, LayerKind k, int upto) {
  int n = 0;
  for (int i = 0; i < upto; ++i)
    if (m.layers[size_t(i)].kind == k) ++n;
  return n;
}

}  // namespace

namespace {

// Shared by forward_tape and run_backward; when bn_stats is non-null,
// BatchNorm layers normalize with batch statistics and record them.
Tensor forward_tape_impl(const ModelGraph& m, const Tensor& x, ForwardMode mode, uint64_t seed,
                         ComputeGraph& tape, std::vector<BnBatchStats>* bn_stats) {
  validate_model(m);
  if (x.rank() != 4 || x.dim(1) != m.input.h || x.dim(2) != m.input.w || x.dim(3) != m.input.c)
    throw std::invalid_argument("forward: input " + shape_str(x.shape()) + " does not match model input " +
                                shape_str({-1, m.input.h, m.input.w, m.input.c}));
  x.require_finite("forward input");
  const bool fq = mode_fake_quant(mode);
  const bool stoch = mode_stochastic(mode);
  if (fq && !m.quantized) throw std::invalid_argument("fake-quant forward requested on a float model");

  tape.nodes.clear();
  tape.layer_node.assign(m.layers.size(), -1);

  auto push = [&](TapeNode n) {
    tape.nodes.push_back(std::move(n));
    return int(tape.nodes.size()) - 1;
  };
  auto push_fq = [&](int src, const QuantParams& qp, const std::string& what) {
    TapeNode n;
    n.op = LayerKind::ReLU;  // unused
    n.is_fake_quant = true;
    n.in = {src, -1};
    n.aux = Tensor({4}, {qp.scale, float(qp.zero_point), qp.symmetric ? 1.f : 0.f, float(qp.bits)});
    n.value = fake_quant_tensor(tape.nodes[size_t(src)].value, qp);
    n.value.require_finite(what);
    return push(std::move(n));
  };

  TapeNode in_node;
  in_node.is_input = true;
  in_node.value = x;
  int cur = push(std::move(in_node));
  if (fq && m.input_qp) cur = push_fq(cur, *m.input_qp, "quantized input");

  for (size_t i = 0; i < m.layers.size(); ++i) {
    const Layer& l = m.layers[i];
    if (l.kind == LayerKind::Softmax) {
      tape.layer_node[i] = cur;
      break;
    }
    const Tensor& src = tape.nodes[size_t(cur)].value;
    TapeNode n;
    n.op = l.kind;
    n.layer = int(i);
    n.in = {cur, -1};
    switch (l.kind) {
      case LayerKind::Conv2D:
        n.value = conv2d(src, l.weights, l.bias, l.stride, l.padding);
        break;
      case LayerKind::DepthwiseConv2D:
        n.value = depthwise_conv2d(src, l.weights, l.bias, l.stride, l.padding);
        break;
      case LayerKind::Dense:
        n.value = dense(src, l.weights, l.bias);
        break;
      case LayerKind::BatchNorm: {
        if (bn_stats) {
          BnBatchStats st;
          batch_moments(src, l.gamma.dim(0), &st.mean, &st.var);
          n.value = batchnorm_train_forward(src, l, st.mean, st.var);
          const int C = l.gamma.dim(0);
          n.aux = Tensor({2, C});
          std::memcpy(n.aux.data(), st.mean.data(), sizeof(float) * size_t(C));
          for (int c = 0; c < C; ++c) n.aux[C + c] = 1.f / std::sqrt(st.var[c] + kBatchNormEps);
          bn_stats->push_back(std::move(st));
        } else {
          n.value = batchnorm_inference(src, l);
        }
        break;
      }
      case LayerKind::ReLU:
        n.value = relu(src);
        break;
      case LayerKind::MaxPool2D:
        n.value = maxpool2d(src, l.kernel_h, l.kernel_w, l.stride, &n.aux);
        break;
      case LayerKind::GlobalAvgPool:
        n.value = global_avg_pool(src);
        break;
      case LayerKind::Dropout: {
        if (stoch) {
          uint64_t lseed = derive_seed(seed, uint64_t(count_kind(m, LayerKind::Dropout, int(i))));
          n.value = dropout_apply(src, l.rate, lseed, &n.aux);
        } else {
          n.value = src;  // identity at deterministic inference
        }
        break;
      }
      case LayerKind::Flatten: {
        int64_t f = src.numel() / src.dim(0);
        n.value = src.reshaped({src.dim(0), int(f)});
        break;
      }
      case LayerKind::Add: {
        int other = tape.layer_node[size_t(l.skip_src)];
        if (other < 0) throw std::logic_error("add: skip source not materialized");
        n.in = {cur, other};
        n.value = add(src, tape.nodes[size_t(other)].value);
        break;
      }
      case LayerKind::Softmax:
        break;  // unreachable
    }
    n.value.require_finite(std::string("output of layer ") + std::to_string(i) + " (" +
                           layer_kind_name(l.kind) + ")");
    cur = push(std::move(n));
    if (fq && l.out_qp)
      cur = push_fq(cur, *l.out_qp, "quantized output of layer " + std::to_string(i));
    tape.layer_node[i] = cur;
  }
  tape.output = cur;
  return tape.nodes[size_t(cur)].value;
}

}  // namespace

Tensor forward_tape(const ModelGraph& m, const Tensor& x, ForwardMode mode, uint64_t seed,
                    ComputeGraph& tape) {
  return forward_tape_impl(m, x, mode, seed, tape, nullptr);
}

Tensor forward(const ModelGraph& m, const Tensor& x, ForwardMode mode, uint64_t seed) {
  ComputeGraph tape;
  return forward_tape(m, x, mode, seed, tape);
}

double cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw std::invalid_argument("cross_entropy: expected [N,K] logits");
  const int N = logits.dim(0), K = logits.dim(1);
  if (int(labels.size()) != N) throw std::invalid_argument("cross_entropy: label count != batch size");
  double total = 0.0;
  for (int s = 0; s < N; ++s) {
    int y = labels[size_t(s)];
    if (y < 0 || y >= K) throw std::invalid_argument("cross_entropy: label out of range");
    const float* z = logits.data() + int64_t(s) * K;
    float mx = z[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, z[k]);
    double sum = 0.0;
    for (int k = 0; k < K; ++k) sum += std::exp(double(z[k]) - double(mx));
    total += double(mx) + std::log(sum) - double(z[y]);
  }
  return total / double(N);
}

Tensor cross_entropy_grad(const Tensor& logits, const std::vector<int>& labels) {
  const int N = logits.dim(0), K = logits.dim(1);
  Tensor g = softmax_rows(logits);
  const float inv_n = 1.f / float(N);
  for (int s = 0; s < N; ++s) {
    float* row = g.data() + int64_t(s) * K;
    row[labels[size_t(s)]] -= 1.f;
    for (int k = 0; k < K; ++k) row[k] *= inv_n;
  }
  return g;
}

namespace {

struct BackwardCtx {
  const ModelGraph* m;
  ComputeGraph* tape;
  std::vector<Tensor> node_grad;  // lazily allocated, freed once consumed
  bool want_params;

  Tensor& grad_of(int node) {
    Tensor& g = node_grad[size_t(node)];
    if (g.empty()) g = Tensor(tape->nodes[size_t(node)].value.shape());
    return g;
  }
};

void conv2d_backward(BackwardCtx& ctx, const TapeNode& node, const Tensor& dy, ParamGrads* pg) {
  const Layer& l = ctx.m->layers[size_t(node.layer)];
  const Tensor& x = ctx.tape->nodes[size_t(node.in[0])].value;
  ConvGeom g = conv_geom(x, l);
  Tensor& dx = ctx.grad_of(node.in[0]);

  const int nchunks = chunk_count(g.N);
  std::vector<Tensor> dw_part, db_part;
  if (pg) {
    dw_part.assign(size_t(nchunks), Tensor(l.weights.shape()));
    db_part.assign(size_t(nchunks), Tensor(l.bias.shape()));
  }
  parallel_for(g.N, [&](int chunk, int64_t s0, int64_t s1) {
    t_bwd_col.resize(size_t(g.OH) * g.OW * g.row_len);
    t_bwd_dcol.resize(size_t(g.OH) * g.OW * g.row_len);
    for (int64_t s = s0; s < s1; ++s) {
      const float* dys = dy.data() + s * g.OH * g.OW * g.Cout;
      // dX: dcol = dY * W^T, scattered back through the patch map
      matmul_bt(dys, l.weights.data(), t_bwd_dcol.data(), g.OH * g.OW, g.row_len, g.Cout);
      col2im_add_one(t_bwd_dcol.data(), g, dx.data() + s * g.H * g.W * g.C);
      if (pg) {
        im2col_one(x.data() + s * g.H * g.W * g.C, g, t_bwd_col.data());
        matmul_at_add(t_bwd_col.data(), dys, dw_part[size_t(chunk)].data(), g.row_len, g.OH * g.OW,
                      g.Cout);
        ArrMap db(db_part[size_t(chunk)].data(), g.Cout);
        for (int p = 0; p < g.OH * g.OW; ++p) db += ConstArrMap(dys + int64_t(p) * g.Cout, g.Cout);
      }
    }
  });
  if (pg) {
    // fixed chunk-order reduction
    pg->dweights[size_t(node.layer)] = Tensor(l.weights.shape());
    pg->dbias[size_t(node.layer)] = Tensor(l.bias.shape());
    for (int c = 0; c < nchunks; ++c) {
      ArrMap(pg->dweights[size_t(node.layer)].data(), l.weights.numel()) +=
          ConstArrMap(dw_part[size_t(c)].data(), l.weights.numel());
      ArrMap(pg->dbias[size_t(node.layer)].data(), l.bias.numel()) +=
          ConstArrMap(db_part[size_t(c)].data(), l.bias.numel());
    }
  }
}

void dwconv_backward(BackwardCtx& ctx, const TapeNode& node, const Tensor& dy, ParamGrads* pg) {
  const Layer& l = ctx.m->layers[size_t(node.layer)];
  const Tensor& x = ctx.tape->nodes[size_t(node.in[0])].value;
  ConvGeom g = conv_geom(x, l);
  Tensor& dx = ctx.grad_of(node.in[0]);
  const int nchunks = chunk_count(g.N);
  std::vector<Tensor> dw_part, db_part;
  if (pg) {
    dw_part.assign(size_t(nchunks), Tensor(l.weights.shape()));
    db_part.assign(size_t(nchunks), Tensor(l.bias.shape()));
  }
  parallel_for(g.N, [&](int chunk, int64_t s0, int64_t s1) {
    for (int64_t s = s0; s < s1; ++s) {
      const float* xs = x.data() + s * g.H * g.W * g.C;
      const float* dys = dy.data() + s * g.OH * g.OW * g.C;
      float* dxs = dx.data() + s * g.H * g.W * g.C;
      for (int oh = 0; oh < g.OH; ++oh)
        for (int ow = 0; ow < g.OW; ++ow) {
          ConstArrMap dyv(dys + (int64_t(oh) * g.OW + ow) * g.C, g.C);
          if (pg) ArrMap(db_part[size_t(chunk)].data(), g.C) += dyv;
          for (int kh = 0; kh < g.KH; ++kh) {
            int ih = oh * g.stride - g.pad_h + kh;
            if (ih < 0 || ih >= g.H) continue;
            for (int kw = 0; kw < g.KW; ++kw) {
              int iw = ow * g.stride - g.pad_w + kw;
              if (iw < 0 || iw >= g.W) continue;
              ArrMap(dxs + (int64_t(ih) * g.W + iw) * g.C, g.C) +=
                  ConstArrMap(l.weights.data() + (int64_t(kh) * g.KW + kw) * g.C, g.C) * dyv;
              if (pg)
                ArrMap(dw_part[size_t(chunk)].data() + (int64_t(kh) * g.KW + kw) * g.C, g.C) +=
                    ConstArrMap(xs + (int64_t(ih) * g.W + iw) * g.C, g.C) * dyv;
            }
          }
        }
    }
  });
  if (pg) {
    pg->dweights[size_t(node.layer)] = Tensor(l.weights.shape());
    pg->dbias[size_t(node.layer)] = Tensor(l.bias.shape());
    for (int c = 0; c < nchunks; ++c) {
      ArrMap(pg->dweights[size_t(node.layer)].data(), l.weights.numel()) +=
          ConstArrMap(dw_part[size_t(c)].data(), l.weights.numel());
      ArrMap(pg->dbias[size_t(node.layer)].data(), l.bias.numel()) +=
          ConstArrMap(db_part[size_t(c)].data(), l.bias.numel());
    }
  }
}

void dense_backward(BackwardCtx& ctx, const TapeNode& node, const Tensor& dy, ParamGrads* pg) {
  const Layer& l = ctx.m->layers[size_t(node.layer)];
  const Tensor& x = ctx.tape->nodes[size_t(node.in[0])].value;
  const int N = x.dim(0), In = l.weights.dim(0), Out = l.weights.dim(1);
  Tensor& dx = ctx.grad_of(node.in[0]);
  parallel_for(N, [&](int, int64_t s0, int64_t s1) {
    for (int64_t s = s0; s < s1; ++s)
      matmul_bt(dy.data() + s * Out, l.weights.data(), dx.data() + s * In, 1, In, Out);
  });
  if (pg) {
    Tensor& dw = pg->dweights[size_t(node.layer)];
    Tensor& db = pg->dbias[size_t(node.layer)];
    dw = Tensor(l.weights.shape());
    db = Tensor(l.bias.shape());
    for (int s = 0; s < N; ++s) {  // sample-order accumulation
      matmul_at_add(x.data() + int64_t(s) * In, dy.data() + int64_t(s) * Out, dw.data(), In, 1, Out);
      ArrMap(db.data(), Out) += ConstArrMap(dy.data() + int64_t(s) * Out, Out);
    }
  }
}

void batchnorm_backward(BackwardCtx& ctx, const TapeNode& node, const Tensor& dy, ParamGrads* pg) {
  const Layer& l = ctx.m->layers[size_t(node.layer)];
  const Tensor& x = ctx.tape->nodes[size_t(node.in[0])].value;
  const int C = l.gamma.dim(0);
  const int64_t rows = x.numel() / C;
  Tensor& dx = ctx.grad_of(node.in[0]);

  Eigen::ArrayXf mean(C), inv_std(C);
  const bool batch_mode = !node.aux.empty();
  if (batch_mode) {
    mean = ConstArrMap(node.aux.data(), C);
    inv_std = ConstArrMap(node.aux.data() + C, C);
  } else {
    mean = ConstArrMap(l.running_mean.data(), C);
    inv_std = (ConstArrMap(l.running_var.data(), C) + kBatchNormEps).sqrt().inverse();
  }
  Eigen::ArrayXf gamma = ConstArrMap(l.gamma.data(), C);

  Eigen::ArrayXf s1 = Eigen::ArrayXf::Zero(C);  // sum dy
  Eigen::ArrayXf s2 = Eigen::ArrayXf::Zero(C);  // sum dy * xhat
  if (pg || batch_mode) {
    for (int64_t r = 0; r < rows; ++r) {
      ConstArrMap dyv(dy.data() + r * C, C);
      auto xhat = (ConstArrMap(x.data() + r * C, C) - mean) * inv_std;
      s1 += dyv;
      s2 += dyv * xhat;
    }
  }
  if (pg) {
    pg->dgamma[size_t(node.layer)] = Tensor({C});
    pg->dbeta[size_t(node.layer)] = Tensor({C});
    ArrMap(pg->dgamma[size_t(node.layer)].data(), C) = s2;
    ArrMap(pg->dbeta[size_t(node.layer)].data(), C) = s1;
  }
  if (batch_mode) {
    const float inv_m = 1.f / float(rows);
    Eigen::ArrayXf a = gamma * inv_std * inv_m;
    for (int64_t r = 0; r < rows; ++r) {
      ConstArrMap dyv(dy.data() + r * C, C);
      auto xhat = (ConstArrMap(x.data() + r * C, C) - mean) * inv_std;
      ArrMap(dx.data() + r * C, C) += a * (float(rows) * dyv - s1 - xhat * s2);
    }
  } else {
    Eigen::ArrayXf a = gamma * inv_std;
    for (int64_t r = 0; r < rows; ++r)
      ArrMap(dx.data() + r * C, C) += a * ConstArrMap(dy.data() + r * C, C);
  }
}

}  // namespace

namespace {

void backprop_on_tape(const ModelGraph& m, ComputeGraph& tape, Tensor logit_grad,
                      const BackwardOptions& opts, BackwardResult& res) {
  if (!logit_grad.same_shape(res.logits))
    throw std::invalid_argument("logit gradient shape " + shape_str(logit_grad.shape()) +
                                " != logits shape " + shape_str(res.logits.shape()));

  BackwardCtx ctx{&m, &tape, {}, opts.param_grads};
  ctx.node_grad.resize(tape.nodes.size());
  ctx.node_grad[size_t(tape.output)] = logit_grad;

  ParamGrads* pg = nullptr;
  if (opts.param_grads) {
    res.param_grads.dweights.resize(m.layers.size());
    res.param_grads.dbias.resize(m.layers.size());
    res.param_grads.dgamma.resize(m.layers.size());
    res.param_grads.dbeta.resize(m.layers.size());
    pg = &res.param_grads;
  }

  for (int ni = int(tape.nodes.size()) - 1; ni >= 0; --ni) {
    TapeNode& node = tape.nodes[size_t(ni)];
    Tensor dy = std::move(ctx.node_grad[size_t(ni)]);
    ctx.node_grad[size_t(ni)] = Tensor();
    if (dy.empty()) continue;  // node not on any gradient path

    if (node.is_input) {
      if (opts.input_grad) res.input_grad = std::move(dy);
      continue;
    }
    if (node.is_fake_quant) {
      // straight-through: pass gradient where the input fell inside the
      // representable range, zero where clipping saturated
      QuantParams qp;
      qp.scale = node.aux[0];
      qp.zero_point = int(node.aux[1]);
      qp.symmetric = node.aux[2] != 0.f;
      qp.bits = int(node.aux[3]);
      const Tensor& src = tape.nodes[size_t(node.in[0])].value;
      Tensor& dx = ctx.grad_of(node.in[0]);
      const float lo = qp.real_min(), hi = qp.real_max();
      for (int64_t i = 0; i < dy.numel(); ++i)
        if (src[i] >= lo && src[i] <= hi) dx[i] += dy[i];
      continue;
    }

    switch (node.op) {
      case LayerKind::Conv2D:
        conv2d_backward(ctx, node, dy, pg);
        break;
      case LayerKind::DepthwiseConv2D:
        dwconv_backward(ctx, node, dy, pg);
        break;
      case LayerKind::Dense:
        dense_backward(ctx, node, dy, pg);
        break;
      case LayerKind::BatchNorm:
        batchnorm_backward(ctx, node, dy, pg);
        break;
      case LayerKind::ReLU: {
        const Tensor& src = tape.nodes[size_t(node.in[0])].value;
        Tensor& dx = ctx.grad_of(node.in[0]);
        for (int64_t i = 0; i < dy.numel(); ++i)
          if (src[i] > 0.f) dx[i] += dy[i];
        break;
      }
      case LayerKind::MaxPool2D: {
        Tensor& dx = ctx.grad_of(node.in[0]);
        const Tensor& src = tape.nodes[size_t(node.in[0])].value;
        const int64_t per_in = src.numel() / src.dim(0);
        const int64_t per_out = dy.numel() / dy.dim(0);
        for (int s = 0; s < dy.dim(0); ++s) {
          float* dxs = dx.data() + s * per_in;
          const float* dys = dy.data() + s * per_out;
          const float* as = node.aux.data() + s * per_out;
          for (int64_t i = 0; i < per_out; ++i) dxs[int64_t(as[i])] += dys[i];
        }
        break;
      }
      case LayerKind::GlobalAvgPool: {
        const Tensor& src = tape.nodes[size_t(node.in[0])].value;
        const int H = src.dim(1), W = src.dim(2), C = src.dim(3);
        Tensor& dx = ctx.grad_of(node.in[0]);
        const float inv = 1.f / float(H * W);
        for (int s = 0; s < src.dim(0); ++s) {
          ConstArrMap dyv(dy.data() + int64_t(s) * C, C);
          float* dxs = dx.data() + int64_t(s) * H * W * C;
          for (int p = 0; p < H * W; ++p) ArrMap(dxs + int64_t(p) * C, C) += dyv * inv;
        }
        break;
      }
      case LayerKind::Dropout: {
        Tensor& dx = ctx.grad_of(node.in[0]);
        if (node.aux.empty()) {  // identity (deterministic mode)
          ArrMap(dx.data(), dx.numel()) += ConstArrMap(dy.data(), dy.numel());
        } else {
          for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i] * node.aux[i];
        }
        break;
      }
      case LayerKind::Flatten: {
        Tensor& dx = ctx.grad_of(node.in[0]);
        ArrMap(dx.data(), dx.numel()) += ConstArrMap(dy.data(), dy.numel());
        break;
      }
      case LayerKind::Add: {
        ArrMap(ctx.grad_of(node.in[0]).data(), dy.numel()) += ConstArrMap(dy.data(), dy.numel());
        ArrMap(ctx.grad_of(node.in[1]).data(), dy.numel()) += ConstArrMap(dy.data(), dy.numel());
        break;
      }
      case LayerKind::Softmax:
        throw std::logic_error("softmax node on tape");
    }
  }
  if (opts.input_grad) res.input_grad.require_finite("input gradient");
}

}  // namespace

BackwardResult run_backward_from(const ModelGraph& m, const Tensor& x, const Tensor& logit_grad,
                                 ForwardMode mode, uint64_t seed, const BackwardOptions& opts) {
  BackwardResult res;
  ComputeGraph tape;
  res.logits = forward_tape_impl(m, x, mode, seed, tape, opts.bn_batch_stats ? &res.bn_stats : nullptr);
  backprop_on_tape(m, tape, logit_grad, opts, res);
  return res;
}

BackwardResult run_backward(const ModelGraph& m, const Tensor& x, const std::vector<int>& labels,
                            ForwardMode mode, uint64_t seed, const BackwardOptions& opts) {
  BackwardResult res;
  ComputeGraph tape;
  res.logits = forward_tape_impl(m, x, mode, seed, tape, opts.bn_batch_stats ? &res.bn_stats : nullptr);
  res.loss = cross_entropy(res.logits, labels);
  backprop_on_tape(m, tape, cross_entropy_grad(res.logits, labels), opts, res);
  return res;
}

Tensor input_gradient(const ModelGraph& m, const Tensor& x, const std::vector<int>& labels,
                      ForwardMode mode, uint64_t seed) {
  BackwardOptions opts;
  opts.input_grad = true;
  return run_backward(m, x, labels, mode, seed, opts).input_grad;
}

ParamGrads parameter_gradients(const ModelGraph& m, const Tensor& x, const std::vector<int>& labels,
                               ForwardMode mode, uint64_t seed) {
  BackwardOptions opts;
  opts.param_grads = true;
  return run_backward(m, x, labels, mode, seed, opts).param_grads;
}

double forward_loss(const ModelGraph& m, const Tensor& x, const std::vector<int>& labels,
                    ForwardMode mode, uint64_t seed, bool bn_batch_stats) {
  ComputeGraph tape;
  std::vector<BnBatchStats> stats;
  Tensor logits = forward_tape_impl(m, x, mode, seed, tape, bn_batch_stats ? &stats : nullptr);
  return cross_entropy(logits, labels);
}

Tensor finite_difference_input_gradient(const ModelGraph& m, const Tensor& x,
                                        const std::vector<int>& labels, float h, ForwardMode mode,
                                        uint64_t seed, bool bn_batch_stats) {
  Tensor g(x.shape());
  Tensor xp = x;
  for (int64_t i = 0; i < x.numel(); ++i) {
    float orig = xp[i];
    xp[i] = orig + h;
    double lp = forward_loss(m, xp, labels, mode, seed, bn_batch_stats);
    xp[i] = orig - h;
    double lm = forward_loss(m, xp, labels, mode, seed, bn_batch_stats);
    xp[i] = orig;
    g[i] = float((lp - lm) / (2.0 * double(h)));
  }
  return g;
}

ParamGrads finite_difference_parameter_gradients(const ModelGraph& m, const Tensor& x,
                                                 const std::vector<int>& labels, float h,
                                                 ForwardMode mode, uint64_t seed, bool bn_batch_stats) {
  ModelGraph probe = m;
  ParamGrads out;
  out.dweights.resize(m.layers.size());
  out.dbias.resize(m.layers.size());
  out.dgamma.resize(m.layers.size());
  out.dbeta.resize(m.layers.size());
  auto fd_tensor = [&](Tensor& param, Tensor& grad_out) {
    if (param.empty()) return;
    grad_out = Tensor(param.shape());
    for (int64_t i = 0; i < param.numel(); ++i) {
      float orig = param[i];
      param[i] = orig + h;
      double lp = forward_loss(probe, x, labels, mode, seed, bn_batch_stats);
      param[i] = orig - h;
      double lm = forward_loss(probe, x, labels, mode, seed, bn_batch_stats);
      param[i] = orig;
      grad_out[i] = float((lp - lm) / (2.0 * double(h)));
    }
  };
  for (size_t i = 0; i < probe.layers.size(); ++i) {
    Layer& l = probe.layers[i];
    fd_tensor(l.weights, out.dweights[i]);
    fd_tensor(l.bias, out.dbias[i]);
    if (l.kind == LayerKind::BatchNorm) {
      fd_tensor(l.gamma, out.dgamma[i]);
      fd_tensor(l.beta, out.dbeta[i]);
    }
  }
  return out;
}

}  // namespace sshield
