#pragma once

#include <Eigen/Core>

namespace sshield {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXf>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXf>;

inline MatMap mat_view(float* p, int rows, int cols) { return MatMap(p, rows, cols); }
inline ConstMatMap mat_view(const float* p, int rows, int cols) { return ConstMatMap(p, rows, cols); }

// All batched matmuls in this library run one GEMM per sample with shapes that
// do not depend on the batch size. Eigen picks its kernel by operand shape, so
// constant shapes give bit-identical results no matter how samples are grouped
// into batches or spread over threads. Do not "optimize" these into one big
// batched GEMM: the batched product takes a different code path and its sums
// reassociate differently.
inline void matmul(const float* a, const float* b, float* c, int m, int k, int n) {
  mat_view(c, m, n).noalias() = mat_view(a, m, k) * mat_view(b, k, n);
}

inline void matmul_add(const float* a, const float* b, float* c, int m, int k, int n) {
  mat_view(c, m, n).noalias() += mat_view(a, m, k) * mat_view(b, k, n);
}

// c[m,n] = a[k,m]^T * b[k,n]
inline void matmul_at(const float* a, const float* b, float* c, int m, int k, int n) {
  mat_view(c, m, n).noalias() = mat_view(a, k, m).transpose() * mat_view(b, k, n);
}

inline void matmul_at_add(const float* a, const float* b, float* c, int m, int k, int n) {
  mat_view(c, m, n).noalias() += mat_view(a, k, m).transpose() * mat_view(b, k, n);
}

// c[m,k] = a[m,n] * b[k,n]^T
inline void matmul_bt(const float* a, const float* b, float* c, int m, int k, int n) {
  mat_view(c, m, k).noalias() = mat_view(a, m, n) * mat_view(b, k, n).transpose();
}

}  // namespace sshield
