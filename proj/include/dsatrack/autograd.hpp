#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "dsatrack/kernels.hpp"
#include "dsatrack/tensor.hpp"

namespace dsa {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::int64_t dim(std::size_t axis) const { return value().dim(axis); }
  std::size_t rank() const { return value().rank(); }
  bool requires_grad() const;
  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const;
  int id() const noexcept { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Backward closure: receives d(loss)/d(output) and the output's forward value,
/// and accumulates into its parents through Tape::accumulate.
using BackwardFn = std::function<void(const Tensor& grad_out, const Tensor& out_value)>;

/// Binary32 mirrors of weight matrices, keyed by the binary64 storage they copy.
/// When a tape carries one, linear layers with no gradient path run in binary32.
class Float32Weights {
 public:
  void add(const Tensor& w) { mats_.insert_or_assign(&w, Float32Matrix::from(w)); }
  const Float32Matrix* find(const Tensor& w) const {
    auto it = mats_.find(&w);
    return it == mats_.end() ? nullptr : &it->second;
  }
  std::size_t size() const noexcept { return mats_.size(); }

 private:
  std::unordered_map<const Tensor*, Float32Matrix> mats_;
};

/// Reverse-mode gradient tape. Nodes are appended in execution order, which is
/// a topological order, so backward() sweeps them once from last to first.
/// Single-owner; not safe to share across threads.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value, bool requires_grad = true);
  /// Leaf that references caller-owned storage, which must outlive the tape.
  Var parameter(const Tensor& storage, bool requires_grad);

  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn, const char* op);
  Var record(Tensor value, std::span<const Var> parents, BackwardFn fn, const char* op);

  /// Seeds d(out)/d(out) = 1 and propagates. `out` must be a single-element tensor.
  void backward(Var out);

  bool has_grad(Var v) const;
  /// Accumulated gradient; a zero tensor of v's shape when nothing reached v.
  Tensor grad(Var v) const;

  /// Used by backward closures.
  void accumulate(Var v, const Tensor& g);
  void accumulate(Var v, Tensor&& g);
  /// Mutable accumulator for scatter-style closures; zero-initialized on first use.
  Tensor& grad_buffer(Var v);

  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t last_backward_visits() const noexcept { return visits_; }

  /// When set, every recorded value is checked for NaN/Inf.
  void set_finite_checks(bool on) noexcept { check_finite_ = on; }

  /// Must outlive the tape. Null restores binary64 everywhere.
  void set_float32_weights(const Float32Weights* w) noexcept { f32_ = w; }
  const Float32Weights* float32_weights() const noexcept { return f32_; }

 private:
  friend class Var;
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    const char* op = "";
    const Tensor& value() const { return external ? *external : owned; }
  };

  const Node& node(Var v) const;
  Node& node(Var v);

  std::deque<Node> nodes_;
  std::size_t visits_ = 0;
  bool check_finite_ = true;
  const Float32Weights* f32_ = nullptr;
};

/// Binds model-owned parameter tensors onto a tape, once per tensor. Tensors in
/// the trainable set become differentiable leaves; the rest are constants.
class ParamBinder {
 public:
  explicit ParamBinder(Tape& tape, const std::unordered_set<const Tensor*>* trainable = nullptr)
      : tape_(tape), trainable_(trainable) {}

  Var operator()(const Tensor& p);
  Tape& tape() const noexcept { return tape_; }
  const std::unordered_map<const Tensor*, Var>& bound() const noexcept { return bound_; }

 private:
  Tape& tape_;
  const std::unordered_set<const Tensor*>* trainable_;
  std::unordered_map<const Tensor*, Var> bound_;
};

// ---- differentiable operations ---------------------------------------------

Var matmul(Var a, Var b);
Var transpose_last2(Var a);
Var permute(Var a, std::vector<int> perm);
Var reshape(Var a, Shape shape);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var add_const(Var a, const Tensor& c);
Var neg(Var a);

Var exp(Var a);
Var log(Var a);
Var abs(Var a);
Var relu(Var a);
Var gelu(Var a);
Var sigmoid(Var a);
Var minimum(Var a, Var b);
Var maximum(Var a, Var b);

Var softmax(Var x, int axis = -1);
Var log_softmax(Var x, int axis = -1);

Var linear(Var x, Var w, Var b);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6);

Var sum(Var x);
Var mean(Var x);
Var sum_axis(Var x, int axis, bool keepdim);
Var mean_axis(Var x, int axis, bool keepdim);

Var concat(std::span<const Var> parts, int axis);
Var index_select(Var x, int axis, std::vector<std::int64_t> indices);
Var slice(Var x, int axis, std::int64_t begin, std::int64_t end);

/// x[r, :] * m[r] for r over the leading axis.
Var scale_rows(Var x, Var m);

/// Forward value is `hard`; the gradient passes to `soft` unchanged.
Var straight_through(Var soft, Tensor hard);
Var stop_gradient(Var x);

/// 3x3 same-padded convolution over a [H, W, Cin] grid with weight [9*Cin, Cout].
Var conv3x3(Var x, Var w, Var b);

/// Penalty-reduced pixel-wise focal loss (alpha=2, beta=4) on sigmoid(logits)
/// against a Gaussian-heatmap target, normalized by the positive count.
Var focal_loss(Var logits, const Tensor& target);

}  // namespace dsa
