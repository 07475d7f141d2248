#include "sshield/attacks.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

#include "sshield/rng.hpp"

namespace sshield {

namespace {

// Large batches are attacked in slices so tape memory stays bounded. Gradients
// and random starts are per sample, so slicing never changes the result.
constexpr int kChunk = 64;

float sgn(float v) { return v > 0.f ? 1.f : (v < 0.f ? -1.f : 0.f); }

void check_inputs(const ModelGraph& m, const Tensor& X, const std::vector<int>& y) {
  if (X.rank() != 4) throw std::invalid_argument("attack input must be [N,H,W,C]");
  if (size_t(X.dim(0)) != y.size()) throw std::invalid_argument("label count mismatch");
  for (int64_t i = 0; i < X.numel(); ++i)
    if (!(X[i] >= 0.f && X[i] <= 1.f))
      throw std::invalid_argument("attack input pixels must lie in [0,1]");
  for (int v : y)
    if (v < 0 || v >= m.n_classes) throw std::invalid_argument("label out of range");
}

void check_spec(const AttackSpec& s) {
  if (s.epsilon < 0 || s.epsilon > 255)
    throw std::invalid_argument("epsilon must be on the 0..255 scale");
  if (s.kind == AttackKind::PGD && s.n_iter < 1)
    throw std::invalid_argument("pgd needs n_iter >= 1");
  if (s.kind == AttackKind::CWL2) {
    if (s.cw.binary_search_steps < 1)
      throw std::invalid_argument("cw needs binary_search_steps >= 1");
    if (s.cw.max_iter < 1) throw std::invalid_argument("cw needs max_iter >= 1");
    if (!(s.cw.step > 0.f) || !(s.cw.c_init > 0.f))
      throw std::invalid_argument("cw step and c_init must be positive");
  }
}

void check_gradient(const Tensor& g) {
  for (int64_t i = 0; i < g.numel(); ++i)
    if (!std::isfinite(g[i])) throw std::runtime_error("attack gradient is not finite");
}

// Success flags, perturbation norms, and the range/ball invariants. A negative
// eps_limit skips the ball check (CW is unconstrained).
void finalize(AttackResult& r, const ModelGraph& m, const Tensor& X, const std::vector<int>& y,
              ForwardMode mode, float eps_limit) {
  const int N = X.dim(0);
  const int64_t per = X.numel() / N;
  r.success.assign(size_t(N), 0);
  r.linf.assign(size_t(N), 0.f);
  r.l2.assign(size_t(N), 0.f);
  for (int64_t i = 0; i < r.adv.numel(); ++i)
    if (!(r.adv[i] >= 0.f && r.adv[i] <= 1.f))
      throw std::logic_error("adversarial pixel escaped [0,1]");
  for (int s = 0; s < N; ++s) {
    const float* a = r.adv.data() + s * per;
    const float* x = X.data() + s * per;
    float linf = 0.f;
    double l2 = 0.0;
    for (int64_t i = 0; i < per; ++i) {
      float d = std::fabs(a[i] - x[i]);
      linf = std::max(linf, d);
      l2 += double(d) * double(d);
    }
    if (eps_limit >= 0.f && linf > eps_limit + 0x1p-20f)
      throw std::logic_error("adversarial example escaped the epsilon ball");
    r.linf[size_t(s)] = linf;
    r.l2[size_t(s)] = float(std::sqrt(l2));
  }
  for (int from = 0; from < N; from += kChunk) {
    const int count = std::min(kChunk, N - from);
    Tensor logits = forward(m, batch_slice(r.adv, from, count), mode, 0);
    for (int s = 0; s < count; ++s) {
      const float* row = logits.data() + int64_t(s) * m.n_classes;
      int best = 0;
      for (int k = 1; k < m.n_classes; ++k)
        if (row[k] > row[best]) best = k;
      r.success[size_t(from + s)] = best != y[size_t(from + s)] ? 1 : 0;
    }
  }
}

}  // namespace

std::string attack_kind_name(AttackKind k) {
  switch (k) {
    case AttackKind::FGSM: return "fgsm";
    case AttackKind::PGD: return "pgd";
    case AttackKind::CWL2: return "cw";
  }
  throw std::logic_error("unknown attack kind");
}

AttackKind attack_kind_from_name(const std::string& name) {
  if (name == "fgsm") return AttackKind::FGSM;
  if (name == "pgd") return AttackKind::PGD;
  if (name == "cw" || name == "cw-l2" || name == "cwl2") return AttackKind::CWL2;
  throw std::invalid_argument("unknown attack kind '" + name + "'");
}

float cw_margin(const Tensor& logits, int y, float kappa) {
  if (logits.rank() != 1 || logits.dim(0) < 2)
    throw std::invalid_argument("cw_margin expects a logit row with >= 2 classes");
  const int k = logits.dim(0);
  if (y < 0 || y >= k) throw std::invalid_argument("class index out of range");
  float other = -std::numeric_limits<float>::infinity();
  for (int a = 0; a < k; ++a)
    if (a != y) other = std::max(other, logits[a]);
  return std::max(logits[y] - other, -kappa);
}

AttackResult fgsm(const ModelGraph& m, const Tensor& X, const std::vector<int>& y,
                  const AttackSpec& spec) {
  check_inputs(m, X, y);
  check_spec(spec);
  const ForwardMode mode = natural_mode(m, false);
  const float eps = float(spec.epsilon) / 255.f;
  AttackResult r;
  r.adv = Tensor(X.shape());
  const int N = X.dim(0);
  const int64_t per = X.numel() / N;
  for (int from = 0; from < N; from += kChunk) {
    const int count = std::min(kChunk, N - from);
    Tensor xb = batch_slice(X, from, count);
    std::vector<int> yb(y.begin() + from, y.begin() + from + count);
    Tensor g = input_gradient(m, xb, yb, mode, 0);
    check_gradient(g);
    float* out = r.adv.data() + int64_t(from) * per;
    for (int64_t i = 0; i < g.numel(); ++i)
      out[i] = std::clamp(xb[i] + eps * sgn(g[i]), 0.f, 1.f);
  }
  finalize(r, m, X, y, mode, eps);
  return r;
}

AttackResult pgd(const ModelGraph& m, const Tensor& X, const std::vector<int>& y,
                 const AttackSpec& spec, uint64_t seed) {
  check_inputs(m, X, y);
  check_spec(spec);
  const ForwardMode mode = natural_mode(m, false);
  const float eps = float(spec.epsilon) / 255.f;
  const float alpha = (spec.alpha < 0.f ? float(spec.epsilon) / 4.f : spec.alpha) / 255.f;
  const float eps1 = (spec.epsilon1 < 0.f ? float(spec.epsilon) / 2.f : spec.epsilon1) / 255.f;
  AttackResult r;
  r.adv = Tensor(X.shape());
  const int N = X.dim(0);
  const int64_t per = X.numel() / N;
  for (int from = 0; from < N; from += kChunk) {
    const int count = std::min(kChunk, N - from);
    Tensor xb = batch_slice(X, from, count);
    std::vector<int> yb(y.begin() + from, y.begin() + from + count);
    Tensor cur(xb.shape());
    for (int s = 0; s < count; ++s) {
      RandomStream rs(derive_seed(seed, uint64_t(from + s)));
      const float* x = xb.data() + s * per;
      float* c = cur.data() + s * per;
      for (int64_t i = 0; i < per; ++i)
        c[i] = std::clamp(x[i] + eps1 * sgn(rs.normal()), 0.f, 1.f);
    }
    // Every iteration clips to the ball, so a start with epsilon1 > epsilon is
    // pulled back on the first step.
    for (int it = 0; it < spec.n_iter; ++it) {
      Tensor g = input_gradient(m, cur, yb, mode, 0);
      check_gradient(g);
      for (int64_t i = 0; i < cur.numel(); ++i) {
        float v = cur[i] + alpha * sgn(g[i]);
        v = std::clamp(v, xb[i] - eps, xb[i] + eps);
        cur[i] = std::clamp(v, 0.f, 1.f);
      }
    }
    std::memcpy(r.adv.data() + int64_t(from) * per, cur.data(), size_t(cur.numel()) * sizeof(float));
  }
  finalize(r, m, X, y, mode, eps);
  return r;
}

namespace {

struct CwSample {
  Tensor best;  // [1,H,W,C]
  double best_l2 = std::numeric_limits<double>::infinity();
  bool found = false;
};

int row_argmax(const float* z, int k) {
  int best = 0;
  for (int i = 1; i < k; ++i)
    if (z[i] > z[best]) best = i;
  return best;
}

// One (c, max_iter) optimization round in tanh space. Updates the running best
// and reports whether this round ever crossed the margin.
bool cw_round(const ModelGraph& m, ForwardMode mode, const Tensor& x0, int label, float kappa,
              double c, const CwParams& p, CwSample& out) {
  const int64_t n = x0.numel();
  const int K = m.n_classes;
  Tensor w(x0.shape()), x(x0.shape());
  for (int64_t i = 0; i < n; ++i)
    w[i] = std::atanh(2.f * std::clamp(x0[i], 1e-6f, 1.f - 1e-6f) - 1.f);

  std::vector<double> mt(size_t(n), 0.0), vt(size_t(n), 0.0);
  const double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;
  bool hit = false;

  BackwardOptions opts;
  opts.input_grad = true;
  for (int it = 1; it <= p.max_iter; ++it) {
    for (int64_t i = 0; i < n; ++i) x[i] = 0.5f * (std::tanh(w[i]) + 1.f);

    Tensor logit_grad({1, K});
    Tensor logits = forward(m, x, mode, 0);
    const float* z = logits.data();
    int runner = -1;
    float zother = -std::numeric_limits<float>::infinity();
    for (int a = 0; a < K; ++a)
      if (a != label && z[a] > zother) {
        zother = z[a];
        runner = a;
      }
    const float margin = z[label] - zother;
    if (!std::isfinite(margin)) throw std::runtime_error("cw margin not finite");

    if (margin <= -kappa && row_argmax(z, K) != label) {
      double l2 = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        double d = double(x[i]) - double(x0[i]);
        l2 += d * d;
      }
      hit = true;
      if (l2 < out.best_l2) {
        out.best_l2 = l2;
        out.best = x;
        out.found = true;
      }
    }

    // d(objective)/dx = 2(x - x0) + c * d margin/dx, margin term dead once
    // clamped at -kappa
    Tensor gm;
    if (margin > -kappa) {
      logit_grad.fill(0.f);
      logit_grad[label] = 1.f;
      logit_grad[runner] = -1.f;
      BackwardResult back = run_backward_from(m, x, logit_grad, mode, 0, opts);
      gm = std::move(back.input_grad);
    }
    const double m_corr = 1.0 - std::pow(b1, it);
    const double v_corr = 1.0 - std::pow(b2, it);
    for (int64_t i = 0; i < n; ++i) {
      double g = 2.0 * (double(x[i]) - double(x0[i]));
      if (!gm.empty()) g += c * double(gm[i]);
      g *= 2.0 * double(x[i]) * (1.0 - double(x[i]));  // dx/dw of the tanh box
      mt[size_t(i)] = b1 * mt[size_t(i)] + (1.0 - b1) * g;
      vt[size_t(i)] = b2 * vt[size_t(i)] + (1.0 - b2) * g * g;
      double nw = double(w[i]) -
                  double(p.step) * (mt[size_t(i)] / m_corr) / (std::sqrt(vt[size_t(i)] / v_corr) + adam_eps);
      if (!std::isfinite(nw)) throw std::runtime_error("cw optimizer state not finite");
      w[i] = float(nw);
    }
  }
  return hit;
}

}  // namespace

AttackResult cw_l2(const ModelGraph& m, const Tensor& X, const std::vector<int>& y,
                   const AttackSpec& spec) {
  check_inputs(m, X, y);
  check_spec(spec);
  const ForwardMode mode = natural_mode(m, false);
  const float kappa = spec.cw.confidence;
  AttackResult r;
  r.adv = X;
  const int N = X.dim(0);
  const int64_t per = X.numel() / N;
  std::vector<unsigned char> solved(size_t(N), 0);

  for (int s = 0; s < N; ++s) {
    Tensor x0 = batch_slice(X, s, 1);
    Tensor z0 = forward(m, x0, mode, 0);
    Tensor row({m.n_classes});
    std::memcpy(row.data(), z0.data(), size_t(m.n_classes) * sizeof(float));
    if (cw_margin(row, y[size_t(s)], kappa) <= -kappa &&
        row_argmax(z0.data(), m.n_classes) != y[size_t(s)]) {
      solved[size_t(s)] = 1;  // already past the boundary, delta stays zero
      continue;
    }

    CwSample best;
    double lower = 0.0, upper = std::numeric_limits<double>::infinity();
    double c = double(spec.cw.c_init);
    try {
      for (int round = 0; round < spec.cw.binary_search_steps; ++round) {
        bool hit = cw_round(m, mode, x0, y[size_t(s)], kappa, c, spec.cw, best);
        if (hit) {
          upper = c;
          c = (lower + upper) / 2.0;
        } else {
          lower = c;
          c = std::isinf(upper) ? c * 10.0 : (lower + upper) / 2.0;
        }
      }
    } catch (const std::runtime_error&) {
      best.found = false;  // blown-up optimization forfeits this sample
    }
    if (best.found) {
      std::memcpy(r.adv.data() + s * per, best.best.data(), size_t(per) * sizeof(float));
      solved[size_t(s)] = 1;
    }
  }

  finalize(r, m, X, y, mode, -1.f);
  // finalize recomputes argmax-based flags; a sample only counts when the
  // optimizer actually certified it (margin past -kappa), so AND the two.
  for (int s = 0; s < N; ++s) r.success[size_t(s)] = r.success[size_t(s)] && solved[size_t(s)];
  return r;
}

AttackResult run_attack(const ModelGraph& m, const Tensor& X, const std::vector<int>& y,
                        const AttackSpec& spec, uint64_t seed) {
  switch (spec.kind) {
    case AttackKind::FGSM: return fgsm(m, X, y, spec);
    case AttackKind::PGD: return pgd(m, X, y, spec, seed);
    case AttackKind::CWL2: return cw_l2(m, X, y, spec);
  }
  throw std::logic_error("unknown attack kind");
}

}  // namespace sshield
