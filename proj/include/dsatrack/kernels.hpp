#pragma once

#include <span>
#include <vector>

#include "dsatrack/tensor.hpp"

// Pure forward kernels over Tensor. The autograd layer calls these for its
// forward values and reuses several of them in backward passes.
namespace dsa {

/// Batched matrix product. Shapes [..., m, k] x [..., k, n]; leading extents
/// must match exactly or be absent on one side (that side is broadcast).
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose_last2(const Tensor& a);
Tensor permute(const Tensor& a, std::span<const int> perm);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

/// Numerically stable softmax along `axis` (max-shifted).
Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax(const Tensor& x, int axis = -1);

/// x[..., in] * w[in, out] + b[out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/// Binary32 copy of a [in, out] weight matrix for the reduced-precision inference path.
struct Float32Matrix {
  std::int64_t rows = 0, cols = 0;
  std::vector<float> data;
  static Float32Matrix from(const Tensor& w);
};

/// linear() with the product taken in binary32; input, bias and result stay binary64.
Tensor linear_f32(const Tensor& x, const Float32Matrix& w, const Tensor& b);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);
Tensor gelu(const Tensor& x);
Tensor gelu_derivative(const Tensor& x);
Tensor sigmoid(const Tensor& x);

Tensor sum_axis(const Tensor& x, int axis, bool keepdim);
Tensor mean_axis(const Tensor& x, int axis, bool keepdim);

Tensor concat(std::span<const Tensor> parts, int axis);
Tensor index_select(const Tensor& x, int axis, std::span<const std::int64_t> indices);

namespace detail {

/// Decomposes a shape around `axis` into (outer, axis length, inner).
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};
AxisSplit split_axis(const Shape& shape, int axis);
int normalize_axis(int axis, std::size_t rank);

void matmul_into(const Tensor& a, bool trans_a, const Tensor& b, bool trans_b, Tensor& out, bool accumulate);

}  // namespace detail

}  // namespace dsa
