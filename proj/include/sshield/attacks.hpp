#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sshield/autodiff.hpp"

namespace sshield {

// White-box attacks. Gradients are taken on the model exactly as given (the
// fake-quant graph when the model is quantized), with dropout off; any input
// filtering a defense applies later is never part of the attack loop.

enum class AttackKind : uint8_t { FGSM, PGD, CWL2 };

std::string attack_kind_name(AttackKind k);
AttackKind attack_kind_from_name(const std::string& name);

struct CwParams {
  int max_iter = 1000;
  int binary_search_steps = 9;
  float confidence = 0.f;  // kappa
  float c_init = 0.01f;
  float step = 0.01f;
};

// Pixel scales are 0..255 to match 8-bit color talk; internally everything is
// divided by 255. Negative alpha/epsilon1 pick the defaults epsilon/4 and
// epsilon/2.
struct AttackSpec {
  AttackKind kind = AttackKind::FGSM;
  int epsilon = 8;
  float alpha = -1.f;
  int n_iter = 10;
  float epsilon1 = -1.f;
  CwParams cw;
};

struct AttackResult {
  Tensor adv;  // same shape as the input batch, pixels in [0,1]
  std::vector<unsigned char> success;
  std::vector<float> linf;
  std::vector<float> l2;
};

// max(Z_y - max_{a != y} Z_a, -kappa) for a single logit row.
float cw_margin(const Tensor& logits, int y, float kappa = 0.f);

AttackResult fgsm(const ModelGraph& m, const Tensor& X, const std::vector<int>& y,
                  const AttackSpec& spec);
AttackResult pgd(const ModelGraph& m, const Tensor& X, const std::vector<int>& y,
                 const AttackSpec& spec, uint64_t seed = 0);
AttackResult cw_l2(const ModelGraph& m, const Tensor& X, const std::vector<int>& y,
                   const AttackSpec& spec);
// Dispatch on spec.kind; seed only matters for PGD.
AttackResult run_attack(const ModelGraph& m, const Tensor& X, const std::vector<int>& y,
                        const AttackSpec& spec, uint64_t seed = 0);

}  // namespace sshield
