#include "dsatrack/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "dsatrack/kernels.hpp"

namespace dsa {

// ---- Var / Tape ---------------------------------------------------------------

const Tensor& Var::value() const { return tape().node(*this).value(); }

bool Var::requires_grad() const { return tape().node(*this).requires_grad; }

Tape& Var::tape() const {
  if (!tape_) throw ValidationError("use of an unbound Var");
  return *tape_;
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape_ != this || v.id_ < 0 || static_cast<std::size_t>(v.id_) >= nodes_.size()) {
    throw ValidationError("Var does not belong to this tape");
  }
  return nodes_[static_cast<std::size_t>(v.id_)];
}

Tape::Node& Tape::node(Var v) {
  return const_cast<Node&>(static_cast<const Tape&>(*this).node(v));
}

Var Tape::constant(Tensor value) { return leaf(std::move(value), false); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  n.op = "leaf";
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::parameter(const Tensor& storage, bool requires_grad) {
  Node n;
  n.external = &storage;
  n.requires_grad = requires_grad;
  n.op = "parameter";
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn, const char* op) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(fn), op);
}

Var Tape::record(Tensor value, std::span<const Var> parents, BackwardFn fn, const char* op) {
  if (check_finite_ && !value.all_finite()) {
    throw NumericalError(std::string("non-finite value produced by ") + op);
  }
  bool needs = false;
  for (const Var& p : parents) {
    if (p.tape_ != this) throw ValidationError(std::string(op) + ": operands recorded on different tapes");
    needs = needs || node(p).requires_grad;
  }
  Node n;
  n.owned = std::move(value);
  n.requires_grad = needs;
  n.op = op;
  if (needs) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::backward(Var out) {
  Node& root = node(out);
  if (root.value().size() != 1) {
    throw ShapeError("backward() needs a scalar output, got " + shape_str(root.value().shape()));
  }
  if (!root.requires_grad) throw ValidationError("backward(): output does not depend on any differentiable input");
  for (auto& n : nodes_) n.grad = Tensor();
  root.grad = Tensor(root.value().shape(), 1.0);
  visits_ = 0;
  for (std::size_t i = static_cast<std::size_t>(out.id_) + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    ++visits_;
    if (n.backward) n.backward(n.grad, n.value());
  }
}

bool Tape::has_grad(Var v) const { return !node(v).grad.empty(); }

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.empty()) return Tensor(n.value().shape());
  return n.grad;
}

void Tape::accumulate(Var v, const Tensor& g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (g.size() != n.value().size()) {
    throw ShapeError(std::string("gradient shape mismatch at ") + n.op + ": " + shape_str(g.shape()) + " vs " +
                     shape_str(n.value().shape()));
  }
  if (n.grad.empty()) {
    n.grad = g.reshaped(n.value().shape());
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

void Tape::accumulate(Var v, Tensor&& g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (n.grad.empty() && g.size() == n.value().size()) {
    n.grad = g.shape() == n.value().shape() ? std::move(g) : g.reshaped(n.value().shape());
    return;
  }
  accumulate(v, static_cast<const Tensor&>(g));
}

Tensor& Tape::grad_buffer(Var v) {
  Node& n = node(v);
  if (n.grad.empty()) n.grad = Tensor(n.value().shape());
  return n.grad;
}

Var ParamBinder::operator()(const Tensor& p) {
  auto it = bound_.find(&p);
  if (it != bound_.end()) return it->second;
  const bool train = trainable_ != nullptr && trainable_->contains(&p);
  Var v = tape_.parameter(p, train);
  bound_.emplace(&p, v);
  return v;
}

// ---- operations -----------------------------------------------------------------

namespace {

Tape& tape_of(Var a) { return a.tape(); }

template <typename F, typename DF>
Var unary(Var a, const char* op, F f, DF df) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return tape_of(a).record(std::move(y), {a},
                           [a, df](const Tensor& g, const Tensor& out) {
                             const Tensor& x = a.value();
                             Tensor gx(x.shape());
                             for (std::size_t i = 0; i < x.size(); ++i) gx[i] = g[i] * df(x[i], out[i]);
                             a.tape().accumulate(a, std::move(gx));
                           },
                           op);
}

void same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

std::vector<int> inverse_perm(const std::vector<int>& p) {
  std::vector<int> inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inv[p[i]] = static_cast<int>(i);
  return inv;
}

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

}  // namespace

Var matmul(Var a, Var b) {
  Tensor out = matmul(a.value(), b.value());
  return tape_of(a).record(std::move(out), {a, b},
                           [a, b](const Tensor& g, const Tensor&) {
                             Tape& t = a.tape();
                             if (a.requires_grad()) {
                               Tensor ga(a.shape());
                               detail::matmul_into(g, false, b.value(), true, ga, false);
                               t.accumulate(a, std::move(ga));
                             }
                             if (b.requires_grad()) {
                               Tensor gb(b.shape());
                               detail::matmul_into(a.value(), true, g, false, gb, false);
                               t.accumulate(b, std::move(gb));
                             }
                           },
                           "matmul");
}

Var transpose_last2(Var a) {
  const int r = static_cast<int>(a.rank());
  if (r < 2) throw ShapeError("transpose_last2: rank < 2");
  std::vector<int> perm(r);
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(a, perm);
}

Var permute(Var a, std::vector<int> perm) {
  Tensor out = permute(a.value(), perm);
  return tape_of(a).record(std::move(out), {a},
                           [a, inv = inverse_perm(perm)](const Tensor& g, const Tensor&) {
                             a.tape().accumulate(a, permute(g, inv));
                           },
                           "permute");
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return tape_of(a).record(std::move(out), {a},
                           [a](const Tensor& g, const Tensor&) { a.tape().accumulate(a, g); }, "reshape");
}

Var add(Var a, Var b) {
  same_shape(a, b, "add");
  return tape_of(a).record(add(a.value(), b.value()), {a, b},
                           [a, b](const Tensor& g, const Tensor&) {
                             a.tape().accumulate(a, g);
                             b.tape().accumulate(b, g);
                           },
                           "add");
}

Var sub(Var a, Var b) {
  same_shape(a, b, "sub");
  return tape_of(a).record(sub(a.value(), b.value()), {a, b},
                           [a, b](const Tensor& g, const Tensor&) {
                             a.tape().accumulate(a, g);
                             if (b.requires_grad()) b.tape().accumulate(b, scale(g, -1.0));
                           },
                           "sub");
}

Var mul(Var a, Var b) {
  same_shape(a, b, "mul");
  return tape_of(a).record(mul(a.value(), b.value()), {a, b},
                           [a, b](const Tensor& g, const Tensor&) {
                             if (a.requires_grad()) a.tape().accumulate(a, mul(g, b.value()));
                             if (b.requires_grad()) b.tape().accumulate(b, mul(g, a.value()));
                           },
                           "mul");
}

Var div(Var a, Var b) {
  same_shape(a, b, "div");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  return tape_of(a).record(std::move(out), {a, b},
                           [a, b](const Tensor& g, const Tensor& y) {
                             const Tensor& bv = b.value();
                             if (a.requires_grad()) {
                               Tensor ga(g.shape());
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] / bv[i];
                               a.tape().accumulate(a, std::move(ga));
                             }
                             if (b.requires_grad()) {
                               Tensor gb(g.shape());
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i] = -g[i] * y[i] / bv[i];
                               b.tape().accumulate(b, std::move(gb));
                             }
                           },
                           "div");
}

Var scale(Var a, double s) {
  return tape_of(a).record(scale(a.value(), s), {a},
                           [a, s](const Tensor& g, const Tensor&) { a.tape().accumulate(a, scale(g, s)); },
                           "scale");
}

Var add_scalar(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v += s;
  return tape_of(a).record(std::move(out), {a},
                           [a](const Tensor& g, const Tensor&) { a.tape().accumulate(a, g); }, "add_scalar");
}

Var add_const(Var a, const Tensor& c) {
  if (a.value().size() != c.size()) throw ShapeError("add_const: shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c[i];
  return tape_of(a).record(std::move(out), {a},
                           [a](const Tensor& g, const Tensor&) { a.tape().accumulate(a, g); }, "add_const");
}

Var neg(Var a) { return scale(a, -1.0); }

Var exp(Var a) {
  return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var abs(Var a) {
  return unary(
      a, "abs", [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var relu(Var a) {
  return unary(
      a, "relu", [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var gelu(Var a) {
  return tape_of(a).record(gelu(a.value()), {a},
                           [a](const Tensor& g, const Tensor&) {
                             Tensor gx = gelu_derivative(a.value());
                             for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= g[i];
                             a.tape().accumulate(a, std::move(gx));
                           },
                           "gelu");
}

Var sigmoid(Var a) {
  Tensor out = sigmoid(a.value());
  return tape_of(a).record(std::move(out), {a},
                           [a](const Tensor& g, const Tensor& y) {
                             Tensor gx(g.shape());
                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * y[i] * (1.0 - y[i]);
                             a.tape().accumulate(a, std::move(gx));
                           },
                           "sigmoid");
}

namespace {

Var select_binary(Var a, Var b, bool take_min) {
  same_shape(a, b, take_min ? "minimum" : "maximum");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = take_min ? std::min(av[i], bv[i]) : std::max(av[i], bv[i]);
  return a.tape().record(std::move(out), {a, b},
                         [a, b, take_min](const Tensor& g, const Tensor&) {
                           const Tensor& av = a.value();
                           const Tensor& bv = b.value();
                           Tensor ga(g.shape()), gb(g.shape());
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             const bool pick_a = take_min ? av[i] <= bv[i] : av[i] >= bv[i];
                             (pick_a ? ga : gb)[i] = g[i];
                           }
                           a.tape().accumulate(a, std::move(ga));
                           b.tape().accumulate(b, std::move(gb));
                         },
                         take_min ? "minimum" : "maximum");
}

}  // namespace

Var minimum(Var a, Var b) { return select_binary(a, b, true); }
Var maximum(Var a, Var b) { return select_binary(a, b, false); }

Var softmax(Var x, int axis) {
  const int ax = detail::normalize_axis(axis, x.rank());
  return tape_of(x).record(softmax(x.value(), ax), {x},
                           [x, ax](const Tensor& g, const Tensor& y) {
                             const auto sp = detail::split_axis(y.shape(), ax);
                             Tensor gx(y.shape());
                             for (std::size_t o = 0; o < sp.outer; ++o) {
                               for (std::size_t in = 0; in < sp.inner; ++in) {
                                 const std::size_t base = o * sp.len * sp.inner + in;
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < sp.len; ++j) dot += g[base + j * sp.inner] * y[base + j * sp.inner];
                                 for (std::size_t j = 0; j < sp.len; ++j) {
                                   const std::size_t k = base + j * sp.inner;
                                   gx[k] = y[k] * (g[k] - dot);
                                 }
                               }
                             }
                             x.tape().accumulate(x, std::move(gx));
                           },
                           "softmax");
}

Var log_softmax(Var x, int axis) {
  const int ax = detail::normalize_axis(axis, x.rank());
  return tape_of(x).record(log_softmax(x.value(), ax), {x},
                           [x, ax](const Tensor& g, const Tensor& y) {
                             const auto sp = detail::split_axis(y.shape(), ax);
                             Tensor gx(y.shape());
                             for (std::size_t o = 0; o < sp.outer; ++o) {
                               for (std::size_t in = 0; in < sp.inner; ++in) {
                                 const std::size_t base = o * sp.len * sp.inner + in;
                                 double gs = 0.0;
                                 for (std::size_t j = 0; j < sp.len; ++j) gs += g[base + j * sp.inner];
                                 for (std::size_t j = 0; j < sp.len; ++j) {
                                   const std::size_t k = base + j * sp.inner;
                                   gx[k] = g[k] - std::exp(y[k]) * gs;
                                 }
                               }
                             }
                             x.tape().accumulate(x, std::move(gx));
                           },
                           "log_softmax");
}

namespace {

// binary32 mirror of w when the tape has one and nothing needs a gradient
const Float32Matrix* f32_weight(Var x, Var w, Var b) {
  const Float32Weights* fw = x.tape().float32_weights();
  if (fw == nullptr || x.requires_grad() || w.requires_grad() || b.requires_grad()) return nullptr;
  return fw->find(w.value());
}

}  // namespace

Var linear(Var x, Var w, Var b) {
  const Float32Matrix* wf = f32_weight(x, w, b);
  Tensor out = wf ? linear_f32(x.value(), *wf, b.value()) : linear(x.value(), w.value(), b.value());
  return tape_of(x).record(std::move(out), {x, w, b},
                           [x, w, b](const Tensor& g, const Tensor&) {
                             Tape& t = x.tape();
                             const std::int64_t in = w.dim(0), od = w.dim(1);
                             const std::int64_t rows = static_cast<std::int64_t>(g.size()) / od;
                             const Tensor g2 = g.reshaped({rows, od});
                             if (x.requires_grad()) {
                               Tensor gx({rows, in});
                               detail::matmul_into(g2, false, w.value(), true, gx, false);
                               t.accumulate(x, std::move(gx));
                             }
                             if (w.requires_grad()) {
                               Tensor gw({in, od});
                               detail::matmul_into(x.value().reshaped({rows, in}), true, g2, false, gw, false);
                               t.accumulate(w, std::move(gw));
                             }
                             if (b.requires_grad()) t.accumulate(b, sum_axis(g2, 0, false));
                           },
                           "linear");
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tensor out = layer_norm(x.value(), gamma.value(), beta.value(), eps);
  return tape_of(x).record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, eps](const Tensor& g, const Tensor&) {
        const Tensor& xv = x.value();
        const Tensor& gv = gamma.value();
        const std::int64_t d = xv.shape().back();
        const std::size_t rows = xv.size() / static_cast<std::size_t>(d);
        Tensor gx(xv.shape()), gg(gv.shape()), gb(gv.shape());
        std::vector<double> xhat(static_cast<std::size_t>(d)), gy(static_cast<std::size_t>(d));
        for (std::size_t r = 0; r < rows; ++r) {
          const double* xr = xv.ptr() + r * d;
          const double* gr = g.ptr() + r * d;
          double mean = 0.0;
          for (std::int64_t j = 0; j < d; ++j) mean += xr[j];
          mean /= static_cast<double>(d);
          double var = 0.0;
          for (std::int64_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
          var /= static_cast<double>(d);
          const double inv = 1.0 / std::sqrt(var + eps);
          double m1 = 0.0, m2 = 0.0;
          for (std::int64_t j = 0; j < d; ++j) {
            xhat[j] = (xr[j] - mean) * inv;
            gy[j] = gr[j] * gv[j];
            m1 += gy[j];
            m2 += gy[j] * xhat[j];
            gg[j] += gr[j] * xhat[j];
            gb[j] += gr[j];
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          double* gxr = gx.ptr() + r * d;
          for (std::int64_t j = 0; j < d; ++j) gxr[j] = inv * (gy[j] - m1 - xhat[j] * m2);
        }
        Tape& t = x.tape();
        t.accumulate(x, std::move(gx));
        t.accumulate(gamma, std::move(gg));
        t.accumulate(beta, std::move(gb));
      },
      "layer_norm");
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return tape_of(x).record(Tensor::scalar(s), {x},
                           [x](const Tensor& g, const Tensor&) {
                             x.tape().accumulate(x, Tensor(x.shape(), g.item()));
                           },
                           "sum");
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var sum_axis(Var x, int axis, bool keepdim) {
  const int ax = detail::normalize_axis(axis, x.rank());
  return tape_of(x).record(sum_axis(x.value(), ax, keepdim), {x},
                           [x, ax](const Tensor& g, const Tensor&) {
                             const auto sp = detail::split_axis(x.shape(), ax);
                             Tensor gx(x.shape());
                             for (std::size_t o = 0; o < sp.outer; ++o) {
                               for (std::size_t j = 0; j < sp.len; ++j) {
                                 std::copy_n(g.ptr() + o * sp.inner, sp.inner, gx.ptr() + (o * sp.len + j) * sp.inner);
                               }
                             }
                             x.tape().accumulate(x, std::move(gx));
                           },
                           "sum_axis");
}

Var mean_axis(Var x, int axis, bool keepdim) {
  const int ax = detail::normalize_axis(axis, x.rank());
  return scale(sum_axis(x, ax, keepdim), 1.0 / static_cast<double>(x.dim(static_cast<std::size_t>(ax))));
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  std::vector<Tensor> values;
  values.reserve(parts.size());
  for (const Var& p : parts) values.push_back(p.value());
  const int ax = detail::normalize_axis(axis, values[0].rank());
  Tensor out = concat(values, ax);
  std::vector<Var> ps(parts.begin(), parts.end());
  return tape_of(parts[0]).record(std::move(out), parts,
                                  [ps, ax](const Tensor& g, const Tensor&) {
                                    const auto osp = detail::split_axis(g.shape(), ax);
                                    std::size_t offset = 0;
                                    for (const Var& p : ps) {
                                      const auto sp = detail::split_axis(p.shape(), ax);
                                      if (p.requires_grad()) {
                                        Tensor gp(p.shape());
                                        const std::size_t chunk = sp.len * sp.inner;
                                        for (std::size_t o = 0; o < sp.outer; ++o) {
                                          std::copy_n(g.ptr() + o * osp.len * osp.inner + offset * osp.inner, chunk,
                                                      gp.ptr() + o * chunk);
                                        }
                                        p.tape().accumulate(p, std::move(gp));
                                      }
                                      offset += sp.len;
                                    }
                                  },
                                  "concat");
}

Var index_select(Var x, int axis, std::vector<std::int64_t> indices) {
  const int ax = detail::normalize_axis(axis, x.rank());
  Tensor out = index_select(x.value(), ax, indices);
  return tape_of(x).record(std::move(out), {x},
                           [x, ax, idx = std::move(indices)](const Tensor& g, const Tensor&) {
                             if (!x.requires_grad()) return;
                             Tensor& gx = x.tape().grad_buffer(x);
                             const auto sp = detail::split_axis(x.shape(), ax);
                             for (std::size_t o = 0; o < sp.outer; ++o) {
                               for (std::size_t j = 0; j < idx.size(); ++j) {
                                 const double* src = g.ptr() + (o * idx.size() + j) * sp.inner;
                                 double* dst = gx.ptr() + (o * sp.len + static_cast<std::size_t>(idx[j])) * sp.inner;
                                 for (std::size_t in = 0; in < sp.inner; ++in) dst[in] += src[in];
                               }
                             }
                           },
                           "index_select");
}

Var slice(Var x, int axis, std::int64_t begin, std::int64_t end) {
  const int ax = detail::normalize_axis(axis, x.rank());
  if (begin < 0 || end > x.dim(static_cast<std::size_t>(ax)) || begin >= end) throw ShapeError("slice: bad range");
  std::vector<std::int64_t> idx(static_cast<std::size_t>(end - begin));
  std::iota(idx.begin(), idx.end(), begin);
  return index_select(x, ax, std::move(idx));
}

Var scale_rows(Var x, Var m) {
  const std::int64_t rows = x.dim(0);
  if (m.value().size() != static_cast<std::size_t>(rows)) throw ShapeError("scale_rows: multiplier length mismatch");
  const std::size_t width = x.value().size() / static_cast<std::size_t>(rows);
  Tensor out = x.value();
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < width; ++c) out[r * width + c] *= m.value()[r];
  }
  return tape_of(x).record(std::move(out), {x, m},
                           [x, m, rows, width](const Tensor& g, const Tensor&) {
                             if (x.requires_grad()) {
                               Tensor gx(x.shape());
                               for (std::int64_t r = 0; r < rows; ++r) {
                                 for (std::size_t c = 0; c < width; ++c) gx[r * width + c] = g[r * width + c] * m.value()[r];
                               }
                               x.tape().accumulate(x, std::move(gx));
                             }
                             if (m.requires_grad()) {
                               Tensor gm(m.shape());
                               for (std::int64_t r = 0; r < rows; ++r) {
                                 double s = 0.0;
                                 for (std::size_t c = 0; c < width; ++c) s += g[r * width + c] * x.value()[r * width + c];
                                 gm[r] = s;
                               }
                               m.tape().accumulate(m, std::move(gm));
                             }
                           },
                           "scale_rows");
}

Var straight_through(Var soft, Tensor hard) {
  if (hard.size() != soft.value().size()) throw ShapeError("straight_through: shape mismatch");
  hard = hard.reshaped(soft.shape());
  return tape_of(soft).record(std::move(hard), {soft},
                              [soft](const Tensor& g, const Tensor&) { soft.tape().accumulate(soft, g); },
                              "straight_through");
}

Var stop_gradient(Var x) { return x.tape().constant(x.value()); }

namespace {

// Zero-padded 3x3 patches: col[(y*W + x), (ky*3 + kx)*C + c]
Tensor im2col3x3(const Tensor& x) {
  const std::int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  Tensor col({h * w, 9 * c});
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t xx = 0; xx < w; ++xx) {
      double* row = col.ptr() + (y * w + xx) * 9 * c;
      for (int ky = 0; ky < 3; ++ky) {
        const std::int64_t sy = y + ky - 1;
        for (int kx = 0; kx < 3; ++kx) {
          const std::int64_t sx = xx + kx - 1;
          if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
          std::copy_n(x.ptr() + (sy * w + sx) * c, c, row + (ky * 3 + kx) * c);
        }
      }
    }
  }
  return col;
}

}  // namespace

Var conv3x3(Var x, Var w, Var b) {
  if (x.rank() != 3 || w.rank() != 2 || w.dim(0) != 9 * x.dim(2)) {
    throw ShapeError("conv3x3: input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()));
  }
  const std::int64_t h = x.dim(0), wd = x.dim(1), c = x.dim(2), oc = w.dim(1);
  const Float32Matrix* wf = f32_weight(x, w, b);
  const Tensor col = im2col3x3(x.value());
  Tensor out = (wf ? linear_f32(col, *wf, b.value()) : linear(col, w.value(), b.value())).reshaped({h, wd, oc});
  return tape_of(x).record(
      std::move(out), {x, w, b},
      [x, w, b, h, wd, c, oc](const Tensor& g, const Tensor&) {
        Tape& t = x.tape();
        const Tensor g2 = g.reshaped({h * wd, oc});
        if (w.requires_grad()) {
          Tensor gw(w.shape());
          detail::matmul_into(im2col3x3(x.value()), true, g2, false, gw, false);
          t.accumulate(w, std::move(gw));
        }
        if (b.requires_grad()) t.accumulate(b, sum_axis(g2, 0, false));
        if (x.requires_grad()) {
          Tensor gcol({h * wd, 9 * c});
          detail::matmul_into(g2, false, w.value(), true, gcol, false);
          Tensor gx(x.shape());
          for (std::int64_t y = 0; y < h; ++y) {
            for (std::int64_t xx = 0; xx < wd; ++xx) {
              const double* row = gcol.ptr() + (y * wd + xx) * 9 * c;
              for (int ky = 0; ky < 3; ++ky) {
                const std::int64_t sy = y + ky - 1;
                for (int kx = 0; kx < 3; ++kx) {
                  const std::int64_t sx = xx + kx - 1;
                  if (sy < 0 || sy >= h || sx < 0 || sx >= wd) continue;
                  double* dst = gx.ptr() + (sy * wd + sx) * c;
                  const double* src = row + (ky * 3 + kx) * c;
                  for (std::int64_t k = 0; k < c; ++k) dst[k] += src[k];
                }
              }
            }
          }
          t.accumulate(x, std::move(gx));
        }
      },
      "conv3x3");
}

Var focal_loss(Var logits, const Tensor& target) {
  const Tensor& z = logits.value();
  if (z.size() != target.size()) throw ShapeError("focal_loss: target shape mismatch");
  double loss = 0.0;
  double positives = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-z[i]));
    const double log_p = -softplus(-z[i]);
    const double log_q = -softplus(z[i]);
    if (target[i] >= 1.0 - 1e-12) {
      positives += 1.0;
      loss -= (1.0 - p) * (1.0 - p) * log_p;
    } else {
      const double wgt = std::pow(1.0 - target[i], 4);
      loss -= wgt * p * p * log_q;
    }
  }
  const double norm = std::max(positives, 1.0);
  return tape_of(logits).record(
      Tensor::scalar(loss / norm), {logits},
      [logits, target, norm](const Tensor& g, const Tensor&) {
        const Tensor& z = logits.value();
        Tensor gz(z.shape());
        for (std::size_t i = 0; i < z.size(); ++i) {
          const double p = 1.0 / (1.0 + std::exp(-z[i]));
          const double q = 1.0 - p;
          double d;
          if (target[i] >= 1.0 - 1e-12) {
            d = 2.0 * p * q * q * (-softplus(-z[i])) - q * q * q;
          } else {
            const double wgt = std::pow(1.0 - target[i], 4);
            d = -wgt * (2.0 * p * p * q * (-softplus(z[i])) - p * p * p);
          }
          gz[i] = g.item() * d / norm;
        }
        logits.tape().accumulate(logits, std::move(gz));
      },
      "focal_loss");
}

}  // namespace dsa
