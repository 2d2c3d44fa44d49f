#include "dsatrack/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace dsa {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

// Eigen takes a scalar path for unaligned heads and tails, which rounds
// differently from the packet path. Going through a fixed aligned block keeps
// results independent of where the buffer happens to sit in memory.
using Block = Eigen::Array<double, 64, 1>;

template <class F>
void blockwise(const double* in, double* out, std::size_t n, F f) {
  Block buf;
  for (std::size_t i = 0; i < n; i += 64) {
    const std::size_t m = std::min<std::size_t>(64, n - i);
    buf.setZero();
    std::copy(in + i, in + i + m, buf.data());
    Block r = f(buf);
    std::copy(r.data(), r.data() + m, out + i);
  }
}

Shape leading(const Shape& s) { return Shape(s.begin(), s.end() - 2); }

std::int64_t batch_of(const Shape& s) {
  std::int64_t n = 1;
  for (std::size_t i = 0; i + 2 < s.size(); ++i) n *= s[i];
  return n;
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

namespace detail {

int normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
  return a;
}

AxisSplit split_axis(const Shape& shape, int axis) {
  const int a = normalize_axis(axis, shape.size());
  AxisSplit s;
  for (int i = 0; i < a; ++i) s.outer *= static_cast<std::size_t>(shape[i]);
  s.len = static_cast<std::size_t>(shape[a]);
  for (std::size_t i = a + 1; i < shape.size(); ++i) s.inner *= static_cast<std::size_t>(shape[i]);
  return s;
}

void matmul_into(const Tensor& a, bool trans_a, const Tensor& b, bool trans_b, Tensor& out, bool accumulate) {
  const auto ra = a.rank();
  const auto rb = b.rank();
  const auto ro = out.rank();
  if (ra < 2 || rb < 2 || ro < 2) throw ShapeError("matmul: operands must be at least rank 2");
  const std::int64_t a_rows = a.shape()[ra - 2], a_cols = a.shape()[ra - 1];
  const std::int64_t b_rows = b.shape()[rb - 2], b_cols = b.shape()[rb - 1];
  const std::int64_t m = trans_a ? a_cols : a_rows;
  const std::int64_t k = trans_a ? a_rows : a_cols;
  const std::int64_t kb = trans_b ? b_cols : b_rows;
  const std::int64_t n = trans_b ? b_rows : b_cols;
  if (k != kb) {
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  if (out.shape()[ro - 2] != m || out.shape()[ro - 1] != n) throw ShapeError("matmul: output extent mismatch");

  const std::int64_t ba = batch_of(a.shape()), bb = batch_of(b.shape()), bo = batch_of(out.shape());
  const std::int64_t batches = std::max({ba, bb, bo});
  if ((ba != 1 && ba != batches) || (bb != 1 && bb != batches) || (bo != 1 && bo != batches)) {
    throw ShapeError("matmul: leading extents not broadcast-compatible");
  }
  const bool a_batched = ra > 2, b_batched = rb > 2, o_batched = ro > 2;

  for (std::int64_t s = 0; s < batches; ++s) {
    ConstMap am(a.ptr() + (a_batched ? s * a_rows * a_cols : 0), a_rows, a_cols);
    ConstMap bm(b.ptr() + (b_batched ? s * b_rows * b_cols : 0), b_rows, b_cols);
    MutMap om(out.ptr() + (o_batched ? s * m * n : 0), m, n);
    const bool acc = accumulate || (!o_batched && s > 0);
    if (!trans_a && !trans_b) {
      if (acc) om.noalias() += am * bm; else om.noalias() = am * bm;
    } else if (trans_a && !trans_b) {
      if (acc) om.noalias() += am.transpose() * bm; else om.noalias() = am.transpose() * bm;
    } else if (!trans_a && trans_b) {
      if (acc) om.noalias() += am * bm.transpose(); else om.noalias() = am * bm.transpose();
    } else {
      if (acc) om.noalias() += am.transpose() * bm.transpose(); else om.noalias() = am.transpose() * bm.transpose();
    }
  }
}

}  // namespace detail

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul: operands must be at least rank 2");
  if (a.shape().back() != b.shape()[b.rank() - 2]) {
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const Shape la = leading(a.shape()), lb = leading(b.shape());
  if (!la.empty() && !lb.empty() && la != lb) {
    throw ShapeError("matmul: leading extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Shape out_shape = la.empty() ? lb : la;
  out_shape.push_back(a.shape()[a.rank() - 2]);
  out_shape.push_back(b.shape().back());
  Tensor out = Tensor::uninit(out_shape);
  detail::matmul_into(a, false, b, false, out, false);
  return out;
}

Tensor transpose_last2(const Tensor& a) {
  const int r = static_cast<int>(a.rank());
  if (r < 2) throw ShapeError("transpose_last2: rank < 2");
  std::vector<int> perm(r);
  for (int i = 0; i < r; ++i) perm[i] = i;
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(a, perm);
}

Tensor permute(const Tensor& a, std::span<const int> perm) {
  const std::size_t r = a.rank();
  if (perm.size() != r) throw ShapeError("permute: permutation rank mismatch");
  std::vector<bool> seen(r, false);
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) {
    const int p = perm[i];
    if (p < 0 || static_cast<std::size_t>(p) >= r || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
    out_shape[i] = a.shape()[p];
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * static_cast<std::size_t>(a.shape()[i]);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) src_stride[i] = in_strides[perm[i]];

  Tensor out = Tensor::uninit(out_shape);
  if (r == 0) {
    out[0] = a[0];
    return out;
  }
  // innermost output axis as a strided run, odometer over the rest
  const std::size_t run = static_cast<std::size_t>(out_shape[r - 1]);
  const std::size_t run_stride = src_stride[r - 1];
  std::vector<std::int64_t> idx(r, 0);
  std::size_t src = 0;
  const std::size_t n = out.size();
  const double* in = a.ptr();
  double* dst = out.ptr();
  for (std::size_t o = 0; o < n; o += run) {
    for (std::size_t j = 0; j < run; ++j) dst[o + j] = in[src + j * run_stride];
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      src += src_stride[d];
      if (idx[d] < out_shape[d]) break;
      src -= src_stride[d] * static_cast<std::size_t>(out_shape[d]);
      idx[d] = 0;
    }
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = a;
  for (double& v : out.data()) v *= s;
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  const auto sp = detail::split_axis(x.shape(), axis);
  Tensor out = Tensor::uninit(x.shape());
  if (sp.inner == 1) {
    // contiguous rows: shift by the row max, then one vectorized exp over everything
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const double* xr = x.ptr() + o * sp.len;
      double mx = xr[0];
      for (std::size_t j = 1; j < sp.len; ++j) mx = std::max(mx, xr[j]);
      double* orow = out.ptr() + o * sp.len;
      for (std::size_t j = 0; j < sp.len; ++j) orow[j] = xr[j] - mx;
    }
    blockwise(out.ptr(), out.ptr(), out.size(), [](const Block& b) -> Block { return b.exp(); });
    for (std::size_t o = 0; o < sp.outer; ++o) {
      double* orow = out.ptr() + o * sp.len;
      double z = 0.0;
      for (std::size_t j = 0; j < sp.len; ++j) z += orow[j];
      for (std::size_t j = 0; j < sp.len; ++j) orow[j] /= z;
    }
    return out;
  }
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      double mx = x[base];
      for (std::size_t j = 1; j < sp.len; ++j) mx = std::max(mx, x[base + j * sp.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < sp.len; ++j) {
        const double e = std::exp(x[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] /= z;
    }
  }
  return out;
}

Tensor log_softmax(const Tensor& x, int axis) {
  const auto sp = detail::split_axis(x.shape(), axis);
  Tensor out = Tensor::uninit(x.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      double mx = x[base];
      for (std::size_t j = 1; j < sp.len; ++j) mx = std::max(mx, x[base + j * sp.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < sp.len; ++j) z += std::exp(x[base + j * sp.inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] = x[base + j * sp.inner] - lse;
    }
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2 || x.rank() < 1 || x.shape().back() != w.shape()[0]) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  }
  const std::int64_t out_dim = w.shape()[1];
  if (b.rank() != 1 || b.shape()[0] != out_dim) throw ShapeError("linear: bias shape " + shape_str(b.shape()));
  const std::int64_t rows = static_cast<std::int64_t>(x.size()) / w.shape()[0];
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  Tensor out = Tensor::uninit(out_shape);
  ConstMap xm(x.ptr(), rows, w.shape()[0]);
  ConstMap wm(w.ptr(), w.shape()[0], out_dim);
  MutMap om(out.ptr(), rows, out_dim);
  om.noalias() = xm * wm;
  Eigen::Map<const Eigen::RowVectorXd> bv(b.ptr(), out_dim);
  om.rowwise() += bv;
  return out;
}

Float32Matrix Float32Matrix::from(const Tensor& w) {
  if (w.rank() != 2) throw ShapeError("Float32Matrix: expected a matrix, got " + shape_str(w.shape()));
  Float32Matrix m{w.dim(0), w.dim(1), std::vector<float>(w.size())};
  std::transform(w.ptr(), w.ptr() + w.size(), m.data.begin(), [](double v) { return static_cast<float>(v); });
  return m;
}

Tensor linear_f32(const Tensor& x, const Float32Matrix& w, const Tensor& b) {
  using RowMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  if (x.rank() < 1 || x.shape().back() != w.rows) {
    throw ShapeError("linear_f32: input " + shape_str(x.shape()) + " vs weight rows " + std::to_string(w.rows));
  }
  if (b.rank() != 1 || b.dim(0) != w.cols) throw ShapeError("linear_f32: bias shape " + shape_str(b.shape()));
  const std::int64_t rows = static_cast<std::int64_t>(x.size()) / w.rows;
  const RowMatF xf = ConstMap(x.ptr(), rows, w.rows).cast<float>();
  Eigen::Map<const RowMatF> wf(w.data.data(), w.rows, w.cols);
  RowMatF of(rows, w.cols);
  of.noalias() = xf * wf;
  Shape out_shape = x.shape();
  out_shape.back() = w.cols;
  Tensor out = Tensor::uninit(out_shape);
  MutMap om(out.ptr(), rows, w.cols);
  om = of.cast<double>();
  om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.ptr(), w.cols);
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::int64_t d = x.shape().back();
  if (gamma.size() != static_cast<std::size_t>(d) || beta.size() != static_cast<std::size_t>(d)) {
    throw ShapeError("layer_norm: affine parameters do not match feature width");
  }
  Tensor out = Tensor::uninit(x.shape());
  const std::size_t rows = x.size() / static_cast<std::size_t>(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.ptr() + r * d;
    double mean = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    double* orow = out.ptr() + r * d;
    for (std::int64_t j = 0; j < d; ++j) orow[j] = (xr[j] - mean) * inv * gamma[j] + beta[j];
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  // tanh form, with tanh(u) = 1 - 2 / (exp(2u) + 1) so the exp vectorizes
  Tensor out = Tensor::uninit(x.shape());
  blockwise(x.ptr(), out.ptr(), x.size(), [](const Block& v) -> Block {
    const Block u = kGeluScale * (v + kGeluCubic * v.cube());
    return v * (1.0 - 1.0 / ((2.0 * u).exp() + 1.0));
  });
  return out;
}

Tensor gelu_derivative(const Tensor& x) {
  Tensor out = Tensor::uninit(x.shape());
  blockwise(x.ptr(), out.ptr(), x.size(), [](const Block& v) -> Block {
    const Block t = 1.0 - 2.0 / ((2.0 * kGeluScale * (v + kGeluCubic * v.cube())).exp() + 1.0);
    return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluScale * (1.0 + 3.0 * kGeluCubic * v.square());
  });
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = Tensor::uninit(x.shape());
  blockwise(x.ptr(), out.ptr(), x.size(), [](const Block& v) -> Block { return 1.0 / (1.0 + (-v).exp()); });
  return out;
}

Tensor sum_axis(const Tensor& x, int axis, bool keepdim) {
  const int a = detail::normalize_axis(axis, x.rank());
  const auto sp = detail::split_axis(x.shape(), a);
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[a] = 1;
  } else {
    out_shape.erase(out_shape.begin() + a);
  }
  Tensor out(out_shape);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t j = 0; j < sp.len; ++j) {
      const double* src = x.ptr() + (o * sp.len + j) * sp.inner;
      double* dst = out.ptr() + o * sp.inner;
      for (std::size_t in = 0; in < sp.inner; ++in) dst[in] += src[in];
    }
  }
  return out;
}

Tensor mean_axis(const Tensor& x, int axis, bool keepdim) {
  const int a = detail::normalize_axis(axis, x.rank());
  return scale(sum_axis(x, a, keepdim), 1.0 / static_cast<double>(x.shape()[a]));
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int a = detail::normalize_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  out_shape[a] = 0;
  for (const auto& p : parts) {
    if (p.rank() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < p.rank(); ++i) {
      if (static_cast<int>(i) != a && p.shape()[i] != parts[0].shape()[i]) {
        throw ShapeError("concat: extent mismatch " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
      }
    }
    out_shape[a] += p.shape()[a];
  }
  Tensor out = Tensor::uninit(out_shape);
  const auto osp = detail::split_axis(out_shape, a);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto sp = detail::split_axis(p.shape(), a);
    const std::size_t chunk = sp.len * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(p.ptr() + o * chunk, chunk, out.ptr() + o * osp.len * osp.inner + offset * osp.inner);
    }
    offset += sp.len;
  }
  return out;
}

Tensor index_select(const Tensor& x, int axis, std::span<const std::int64_t> indices) {
  const int a = detail::normalize_axis(axis, x.rank());
  const auto sp = detail::split_axis(x.shape(), a);
  Shape out_shape = x.shape();
  out_shape[a] = static_cast<std::int64_t>(indices.size());
  Tensor out = Tensor::uninit(out_shape);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t j = 0; j < indices.size(); ++j) {
      const auto src_j = indices[j];
      if (src_j < 0 || static_cast<std::size_t>(src_j) >= sp.len) throw ShapeError("index_select: index out of range");
      std::copy_n(x.ptr() + (o * sp.len + static_cast<std::size_t>(src_j)) * sp.inner, sp.inner,
                  out.ptr() + (o * indices.size() + j) * sp.inner);
    }
  }
  return out;
}

}  // namespace dsa
