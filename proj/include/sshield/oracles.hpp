#pragma once

#include <functional>

#include "sshield/autodiff.hpp"
#include "sshield/tensor.hpp"

// Deliberately naive reference implementations. Each one recomputes a result
// the fast path also produces, using a different algorithm (plain nested
// loops, sorting, finite differences), so agreement is meaningful evidence
// rather than the same code run twice. Keep these slow and obvious; they are
// correctness anchors, not production code.
namespace sshield::oracle {

// Central difference for a scalar function, in double precision.
double finite_difference(const std::function<double(double)>& f, double x, double h);

// Six nested loops, zero padding, no im2col, no Eigen.
Tensor conv2d_naive(const Tensor& x, const Tensor& w, const Tensor& b, int stride, bool same_pad);

// Median smoothing via explicit window gather + std::sort per output pixel.
// Top-left anchored window, edge replication at bottom/right, even windows
// average the two middle order statistics.
Tensor median_smooth_naive(const Tensor& x, int win_h, int win_w);

// ECE recomputed per definition with a per-sample pass per bin (O(n_bins * n)).
double ece_naive(const std::vector<float>& confidence, const std::vector<unsigned char>& correct,
                 int n_bins);

struct GradCheckResult {
  double max_rel_err = 0.0;
  double frac_within = 1.0;  // fraction of coordinates within tolerance
  int64_t n_coords = 0;
  bool pass = false;
};

// Compares analytic input+parameter gradients against central differences.
// Relative error per coordinate uses max(|a|,|b|,floor) in the denominator.
// The floor matters: float32 forwards give the central difference an absolute
// noise floor around 1e-4 (machine eps times loss, divided by 2h), so
// coordinates whose true gradient is ~0 (e.g. a conv bias feeding a
// batch-stats BatchNorm) would show large *relative* error with a tiny floor
// even though the analytic value is exactly right. floor = 0.05 makes the
// small-coordinate comparison an absolute check at tol*floor = 5e-4, just
// above that noise, while gradients larger than the floor are still compared
// relatively.
GradCheckResult gradient_check(const ModelGraph& m, const Tensor& x, const std::vector<int>& labels,
                               float h, double tol, double min_frac, ForwardMode mode = ForwardMode::Deterministic,
                               uint64_t seed = 0, double denom_floor = 5e-2, bool bn_batch_stats = false);

}  // namespace sshield::oracle
