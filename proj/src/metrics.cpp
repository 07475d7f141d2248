#include "sshield/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace sshield {

double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels) {
  if (predicted.empty() || predicted.size() != labels.size())
    throw std::invalid_argument("accuracy: need equal nonempty prediction/label lists");
  int64_t hit = 0;
  for (size_t i = 0; i < predicted.size(); ++i) hit += predicted[i] == labels[i];
  return double(hit) / double(predicted.size());
}

double ece(const std::vector<float>& confidences, const std::vector<unsigned char>& correct,
           int n_bins, std::vector<ReliabilityBin>* bins_out) {
  if (confidences.empty() || confidences.size() != correct.size())
    throw std::invalid_argument("ece: need equal nonempty confidence/correct lists");
  if (n_bins < 1) throw std::invalid_argument("ece: need at least one bin");

  std::vector<ReliabilityBin> bins(static_cast<size_t>(n_bins));
  for (int b = 0; b < n_bins; ++b) {
    bins[size_t(b)].lower = float(b) / float(n_bins);
    bins[size_t(b)].upper = float(b + 1) / float(n_bins);
  }
  std::vector<double> conf_sum(size_t(n_bins), 0.0), hit_sum(size_t(n_bins), 0.0);
  for (size_t i = 0; i < confidences.size(); ++i) {
    float c = confidences[i];
    if (!(c >= 0.f) || c > 1.f) throw std::invalid_argument("ece: confidence outside [0,1]");
    int b = int(std::ceil(double(c) * n_bins)) - 1;  // right-closed bins, 0 joins the first
    if (b < 0) b = 0;
    if (b >= n_bins) b = n_bins - 1;
    bins[size_t(b)].count += 1;
    conf_sum[size_t(b)] += c;
    hit_sum[size_t(b)] += correct[i] ? 1.0 : 0.0;
  }
  double e = 0.0;
  const double n = double(confidences.size());
  for (int b = 0; b < n_bins; ++b) {
    ReliabilityBin& rb = bins[size_t(b)];
    if (rb.count == 0) continue;
    rb.mean_confidence = conf_sum[size_t(b)] / rb.count;
    rb.accuracy = hit_sum[size_t(b)] / rb.count;
    e += (rb.count / n) * std::abs(rb.accuracy - rb.mean_confidence);
  }
  if (bins_out) *bins_out = std::move(bins);
  return e;
}

int argmax_row(const float* row, int k) {
  int best = 0;
  for (int i = 1; i < k; ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

Predictions predictions_from_probs(const Tensor& probs) {
  if (probs.rank() != 2 || probs.dim(0) < 1)
    throw std::invalid_argument("predictions_from_probs: expected a nonempty [N,K] tensor");
  const int N = probs.dim(0), K = probs.dim(1);
  Predictions p;
  p.cls.resize(size_t(N));
  p.conf.resize(size_t(N));
  for (int i = 0; i < N; ++i) {
    const float* row = probs.data() + int64_t(i) * K;
    int c = argmax_row(row, K);
    p.cls[size_t(i)] = c;
    p.conf[size_t(i)] = row[c];
  }
  return p;
}

EvalReport evaluate(const Tensor& probs, const std::vector<int>& labels, int n_bins) {
  Predictions p = predictions_from_probs(probs);
  if (labels.size() != p.cls.size())
    throw std::invalid_argument("evaluate: label count does not match batch");
  EvalReport r;
  r.n_samples = int(labels.size());
  r.accuracy = accuracy(p.cls, labels);
  std::vector<unsigned char> correct(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) correct[i] = p.cls[i] == labels[i];
  r.ece = ece(p.conf, correct, n_bins, &r.bins);
  return r;
}

}  // namespace sshield
