#include "sshield/train.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "sshield/rng.hpp"

namespace sshield {

namespace {

constexpr float kBnMomentum = 0.1f;
constexpr int kEvalBatch = 256;

void check_config(const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (cfg.batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (!(cfg.lr >= 0.f)) throw std::invalid_argument("learning rate must be >= 0");
  if (!(cfg.momentum >= 0.f && cfg.momentum < 1.f))
    throw std::invalid_argument("momentum must be in [0,1)");
  if (!(cfg.weight_decay >= 0.f)) throw std::invalid_argument("weight decay must be >= 0");
  if (!(cfg.lr_decay > 0.f && cfg.lr_decay <= 1.f))
    throw std::invalid_argument("lr decay factor must be in (0,1]");
  if (cfg.decay_every < 0) throw std::invalid_argument("decay interval must be >= 0");
}

// epoch is 0-based here
double epoch_lr(const TrainConfig& cfg, int epoch) {
  if (cfg.decay_every <= 0) return double(cfg.lr);
  return double(cfg.lr) * std::pow(double(cfg.lr_decay), double(epoch / cfg.decay_every));
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& order, int from, int count) {
  std::vector<int> shape = x.shape();
  shape[0] = count;
  Tensor out(shape);
  const int64_t row = x.numel() / x.dim(0);
  for (int i = 0; i < count; ++i)
    std::memcpy(out.data() + int64_t(i) * row, x.data() + int64_t(order[size_t(from + i)]) * row,
                size_t(row) * sizeof(float));
  return out;
}

// Momentum buffers, parallel to model.layers. Entries stay empty for layers
// without that parameter.
struct Velocity {
  std::vector<Tensor> w, b, gamma, beta;
};

Velocity make_velocity(const ModelGraph& m) {
  Velocity v;
  const size_t n = m.layers.size();
  v.w.resize(n);
  v.b.resize(n);
  v.gamma.resize(n);
  v.beta.resize(n);
  for (size_t i = 0; i < n; ++i) {
    const Layer& l = m.layers[i];
    if (!l.weights.empty()) v.w[i] = Tensor(l.weights.shape());
    if (!l.bias.empty()) v.b[i] = Tensor(l.bias.shape());
    if (!l.gamma.empty()) v.gamma[i] = Tensor(l.gamma.shape());
    if (!l.beta.empty()) v.beta[i] = Tensor(l.beta.shape());
  }
  return v;
}

// v = mu*v + g + wd*p; p -= lr*v
void sgd_step(Tensor& p, Tensor& v, const Tensor& g, double lr, float mu, float wd) {
  if (g.empty()) return;
  for (int64_t i = 0; i < p.numel(); ++i) {
    v[i] = mu * v[i] + g[i] + wd * p[i];
    p[i] = float(double(p[i]) - lr * double(v[i]));
  }
}

void update_bn_running_stats(ModelGraph& m, const std::vector<BnBatchStats>& stats) {
  size_t j = 0;
  for (Layer& l : m.layers) {
    if (l.kind != LayerKind::BatchNorm) continue;
    const BnBatchStats& s = stats.at(j++);
    for (int64_t i = 0; i < l.running_mean.numel(); ++i) {
      l.running_mean[i] = (1.f - kBnMomentum) * l.running_mean[i] + kBnMomentum * s.mean[i];
      l.running_var[i] = (1.f - kBnMomentum) * l.running_var[i] + kBnMomentum * s.var[i];
    }
  }
}

}  // namespace

TrainHistory train(ModelGraph& m, const Dataset& train_set, const Dataset& test_set,
                   const TrainConfig& cfg) {
  check_config(cfg);
  if (m.quantized) throw std::invalid_argument("training expects a float model");
  if (train_set.n() == 0) throw std::invalid_argument("empty training set");

  const int n = train_set.n();
  Velocity vel = make_velocity(m);
  BackwardOptions opts;
  opts.param_grads = true;
  opts.bn_batch_stats = true;

  TrainHistory hist;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = epoch_lr(cfg, epoch);
    RandomStream order_rs(derive_seed(cfg.seed, uint64_t(epoch)));
    std::vector<int> order = order_rs.permutation(n);

    double loss_sum = 0.0;
    int64_t seen = 0;
    const int n_batches = (n + cfg.batch_size - 1) / cfg.batch_size;
    for (int b = 0; b < n_batches; ++b) {
      const int from = b * cfg.batch_size;
      const int count = std::min(cfg.batch_size, n - from);
      Tensor xb = gather_rows(train_set.x, order, from, count);
      std::vector<int> yb(static_cast<size_t>(count));
      for (int i = 0; i < count; ++i) yb[size_t(i)] = train_set.y[size_t(order[size_t(from + i)])];

      BackwardResult res;
      try {
        res = run_backward(m, xb, yb, ForwardMode::Stochastic,
                           derive_seed(cfg.seed, uint64_t(epoch), uint64_t(b)), opts);
      } catch (const std::exception& e) {
        std::ostringstream msg;
        msg << "training aborted at epoch " << (epoch + 1) << ", batch " << (b + 1) << ": "
            << e.what();
        throw std::runtime_error(msg.str());
      }
      if (!std::isfinite(res.loss)) {
        std::ostringstream msg;
        msg << "training diverged at epoch " << (epoch + 1) << ", batch " << (b + 1)
            << ": loss is not finite";
        throw std::runtime_error(msg.str());
      }
      loss_sum += res.loss * count;
      seen += count;

      update_bn_running_stats(m, res.bn_stats);
      for (size_t i = 0; i < m.layers.size(); ++i) {
        Layer& l = m.layers[i];
        const bool decay_kernel = l.kind == LayerKind::Conv2D ||
                                  l.kind == LayerKind::DepthwiseConv2D || l.kind == LayerKind::Dense;
        sgd_step(l.weights, vel.w[i], res.param_grads.dweights[i], lr, cfg.momentum,
                 decay_kernel ? cfg.weight_decay : 0.f);
        sgd_step(l.bias, vel.b[i], res.param_grads.dbias[i], lr, cfg.momentum, 0.f);
        sgd_step(l.gamma, vel.gamma[i], res.param_grads.dgamma[i], lr, cfg.momentum, 0.f);
        sgd_step(l.beta, vel.beta[i], res.param_grads.dbeta[i], lr, cfg.momentum, 0.f);
      }
    }

    EpochStats st;
    st.epoch = epoch + 1;
    st.train_loss = loss_sum / double(seen);
    st.lr = lr;
    if (test_set.n() > 0) {
      try {
        st.test_accuracy = evaluate(m, test_set).accuracy;
      } catch (const std::exception& e) {
        std::ostringstream msg;
        msg << "evaluation failed after epoch " << (epoch + 1) << ": " << e.what();
        throw std::runtime_error(msg.str());
      }
    }
    if (cfg.on_epoch) cfg.on_epoch(st);
    hist.epochs.push_back(st);
  }
  return hist;
}

Tensor predict_probs(const ModelGraph& m, const Dataset& split, ForwardMode mode, uint64_t seed) {
  if (split.n() == 0) throw std::invalid_argument("empty split");
  const int n = split.n();
  Tensor probs({n, m.n_classes});
  for (int from = 0, chunk = 0; from < n; from += kEvalBatch, ++chunk) {
    const int count = std::min(kEvalBatch, n - from);
    Tensor xb = batch_slice(split.x, from, count);
    uint64_t s = mode_stochastic(mode) ? derive_seed(seed, uint64_t(chunk)) : seed;
    Tensor p = softmax_rows(forward(m, xb, mode, s));
    std::memcpy(probs.data() + int64_t(from) * m.n_classes, p.data(),
                size_t(p.numel()) * sizeof(float));
  }
  return probs;
}

EvalReport evaluate(const ModelGraph& m, const Dataset& split, ForwardMode mode, uint64_t seed,
                    int n_bins) {
  Tensor probs = predict_probs(m, split, mode, seed);
  EvalReport rep = evaluate(probs, split.y, n_bins);
  std::ostringstream cfg;
  cfg << m.arch << (m.quantized ? " int8" : " float");
  rep.config = cfg.str();
  return rep;
}

}  // namespace sshield
