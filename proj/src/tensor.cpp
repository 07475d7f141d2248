#include "sshield/tensor.hpp"

#include <Eigen/Core>
#include <cmath>
#include <stdexcept>

namespace sshield {

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  data_.assign(size_t(shape_numel(shape_)), 0.f);
}

Tensor::Tensor(std::vector<int> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != int64_t(data_.size()))
    throw std::invalid_argument("tensor shape " + shape_str(shape_) + " does not match data length " +
                                std::to_string(data_.size()));
}

Tensor Tensor::full(std::vector<int> shape, float value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::reshaped(std::vector<int> new_shape) const {
  if (shape_numel(new_shape) != numel())
    throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) +
                                " changes element count");
  Tensor t;
  t.shape_ = std::move(new_shape);
  t.data_ = data_;
  return t;
}

bool Tensor::all_finite() const {
  if (data_.empty()) return true;
  return Eigen::Map<const Eigen::ArrayXf>(data_.data(), data_.size()).isFinite().all();
}

void Tensor::require_finite(const std::string& what) const {
  if (!all_finite()) throw std::runtime_error("non-finite values in " + what);
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

static void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor r(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) r[i] = a[i] + b[i];
  return r;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor r(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) r[i] = a[i] - b[i];
  return r;
}

Tensor add_scaled(const Tensor& a, const Tensor& b, float s) {
  check_same_shape(a, b, "add_scaled");
  Tensor r(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) r[i] = a[i] + s * b[i];
  return r;
}

Tensor clamp(const Tensor& a, float lo, float hi) {
  Tensor r(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) r[i] = std::min(hi, std::max(lo, a[i]));
  return r;
}

Tensor sign(const Tensor& a) {
  Tensor r(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) r[i] = a[i] > 0.f ? 1.f : (a[i] < 0.f ? -1.f : 0.f);
  return r;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "max_abs_diff");
  float m = 0.f;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double l2_diff(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "l2_diff");
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = double(a[i]) - double(b[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

Tensor batch_slice(const Tensor& x, int from, int count) {
  if (x.rank() < 1) throw std::invalid_argument("batch_slice needs rank >= 1");
  int n = x.dim(0);
  if (from < 0 || count < 0 || from + count > n)
    throw std::invalid_argument("batch_slice range [" + std::to_string(from) + "," +
                                std::to_string(from + count) + ") out of [0," + std::to_string(n) + ")");
  std::vector<int> shp = x.shape();
  shp[0] = count;
  int64_t stride = x.numel() / std::max(1, n);
  Tensor r(shp);
  std::copy(x.data() + from * stride, x.data() + (from + count) * stride, r.data());
  return r;
}

}  // namespace sshield
