#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sshield {

// Dense float32 tensor, row-major, NHWC for images. Shapes are small vectors
// of ints; data is contiguous. This is the one value type the whole library
// passes around; heavy math happens through Eigen maps over data().
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, std::vector<float> data);

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, float value);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return int(shape_.size()); }
  int dim(int i) const { return shape_[size_t(i)]; }
  int64_t numel() const { return int64_t(data_.size()); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  float& operator[](int64_t i) { return data_[size_t(i)]; }
  float operator[](int64_t i) const { return data_[size_t(i)]; }
  std::vector<float>& vec() { return data_; }
  const std::vector<float>& vec() const { return data_; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  // Same data, new shape (element counts must match).
  Tensor reshaped(std::vector<int> new_shape) const;

  bool all_finite() const;
  // Throws std::runtime_error naming `what` if any element is NaN/Inf.
  void require_finite(const std::string& what) const;

  void fill(float v);

 private:
  std::vector<int> shape_;
  std::vector<float> data_;
};

std::string shape_str(const std::vector<int>& shape);
int64_t shape_numel(const std::vector<int>& shape);

// Elementwise helpers used by attacks/defenses. All return fresh tensors and
// require matching shapes where two tensors are involved.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor add_scaled(const Tensor& a, const Tensor& b, float s);  // a + s*b
Tensor clamp(const Tensor& a, float lo, float hi);
Tensor sign(const Tensor& a);  // sign(0) = 0
float max_abs_diff(const Tensor& a, const Tensor& b);
double l2_diff(const Tensor& a, const Tensor& b);

// Picks sample `n` out of a batch whose leading dim is N; returns rank-1 copy
// helpers used rarely (tests); hot paths index raw pointers instead.
Tensor batch_slice(const Tensor& x, int from, int count);

}  // namespace sshield
