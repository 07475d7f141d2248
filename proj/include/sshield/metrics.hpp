#pragma once

#include <string>
#include <vector>

#include "sshield/tensor.hpp"

namespace sshield {

struct ReliabilityBin {
  float lower = 0.f, upper = 0.f;  // bin covers (lower, upper]
  int count = 0;
  double mean_confidence = 0.0;
  double accuracy = 0.0;
};

struct EvalReport {
  int n_samples = 0;
  double accuracy = 0.0;
  double ece = 0.0;
  std::vector<ReliabilityBin> bins;
  std::string config;  // provenance string set by the caller (attack/defense/seed)
};

double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels);

// Expected calibration error over equal-width right-closed bins of (0,1];
// confidence 0 lands in the first bin, empty bins contribute nothing.
double ece(const std::vector<float>& confidences, const std::vector<unsigned char>& correct,
           int n_bins, std::vector<ReliabilityBin>* bins_out = nullptr);

// Lowest index wins ties, matching the pooling kernels.
int argmax_row(const float* row, int k);

struct Predictions {
  std::vector<int> cls;
  std::vector<float> conf;  // probability of the argmax class
};

// probs is [N,K] rows of probabilities (softmax output or an ensemble mean).
Predictions predictions_from_probs(const Tensor& probs);

EvalReport evaluate(const Tensor& probs, const std::vector<int>& labels, int n_bins = 10);

}  // namespace sshield
