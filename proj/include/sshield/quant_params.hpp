#pragma once

#include <cmath>

namespace sshield {

// Affine quantization parameters for one tensor or activation site.
// Weights: symmetric int8, levels [-127, 127], zero_point 0.
// Activations: asymmetric uint8, levels [0, 255], real range nudged to
// include zero so that q == zero_point represents exactly 0.0.
struct QuantParams {
  float scale = 1.f;
  int zero_point = 0;
  bool symmetric = false;
  int bits = 8;

  int qmin() const { return symmetric ? -127 : 0; }
  int qmax() const { return symmetric ? 127 : 255; }
  float real_min() const { return scale * float(qmin() - zero_point); }
  float real_max() const { return scale * float(qmax() - zero_point); }
};

// Round half away from zero. std::round has exactly this rule, but we spell it
// via trunc so the compiler can vectorize it; valid for |v| < 2^23 which the
// int8 domain guarantees.
inline float round_half_away(float v) { return std::trunc(v + std::copysign(0.5f, v)); }

inline float quantize_value(float x, const QuantParams& qp) {
  float q = round_half_away(x / qp.scale) + float(qp.zero_point);
  float lo = float(qp.qmin()), hi = float(qp.qmax());
  return q < lo ? lo : (q > hi ? hi : q);
}

inline float fake_quant_value(float x, const QuantParams& qp) {
  return qp.scale * (quantize_value(x, qp) - float(qp.zero_point));
}

}  // namespace sshield
