#include "dsatrack/relevance.hpp"

#include <cmath>

namespace dsa {

TinyMlp TinyMlp::init(std::int64_t in, RngStream& rng) {
  const std::int64_t hidden = 2 * in;
  TinyMlp m;
  m.w1 = rng.normal_tensor({in, hidden}, 1.0 / std::sqrt(static_cast<double>(in)));
  m.b1 = Tensor({hidden});
  m.w2 = rng.normal_tensor({hidden, 2}, 0.02);
  m.b2 = Tensor({2});
  return m;
}

Var apply_mlp(const TinyMlp& mlp, Var x, ParamBinder& params) {
  if (x.value().shape().back() != mlp.input_width()) {
    throw ShapeError("apply_mlp: input width " + std::to_string(x.value().shape().back()) + " vs mlp width " +
                     std::to_string(mlp.input_width()));
  }
  Var h = gelu(linear(x, params(mlp.w1), params(mlp.b1)));
  return linear(h, params(mlp.w2), params(mlp.b2));
}

Var pool_nodes(const CorrelationMap& c) {
  Var m = mean_axis(c.values, 0, false);  // [N_z, l]
  return reshape(m, {c.n_z, 1, c.heads});
}

Var node_similarity(Var v) {
  if (v.rank() != 3 || v.dim(1) != 1) throw ShapeError("node_similarity: expected [N_z, 1, l], got " + shape_str(v.shape()));
  Var col = permute(v, {2, 0, 1});  // [l, N_z, 1]
  Var row = permute(v, {2, 1, 0});  // [l, 1, N_z]
  return permute(matmul(col, row), {1, 2, 0});
}

Var relevance_logits(Var a, const TinyMlp& mlp, ParamBinder& params) {
  if (a.rank() != 3) throw ShapeError("relevance_logits: expected [N_z, N_z, l]");
  return log_softmax(apply_mlp(mlp, a, params), -1);
}

Tensor one_hot_argmax(const Tensor& x) {
  const std::int64_t k = x.shape().back();
  Tensor out(x.shape());
  const std::size_t rows = x.size() / static_cast<std::size_t>(k);
  for (std::size_t r = 0; r < rows; ++r) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < k; ++j) {
      if (x[r * k + j] > x[r * k + best]) best = j;
    }
    out[r * k + best] = 1.0;
  }
  return out;
}

RelevanceGraph gumbel_relevance(Var logits, double tau, GumbelMode mode, RngStream& rng) {
  if (mode == GumbelMode::DeterministicArgmax) return gumbel_relevance_with_noise(logits, tau, mode, Tensor(logits.shape()));
  return gumbel_relevance_with_noise(logits, tau, mode, rng.gumbel_tensor(logits.shape()));
}

RelevanceGraph gumbel_relevance_with_noise(Var logits, double tau, GumbelMode mode, const Tensor& noise) {
  if (!(tau > 0.0)) throw ValidationError("gumbel_relevance: temperature must be positive");
  if (logits.rank() != 3 || logits.dim(2) != 2) throw ShapeError("gumbel_relevance: expected [N_z, N_z, 2] logits");
  const std::int64_t n = logits.dim(0);
  Tape& tape = logits.tape();
  RelevanceGraph g;
  g.logits = logits;
  g.tau = tau;
  g.mode = mode;

  if (mode == GumbelMode::DeterministicArgmax) {
    // keep iff pi_keep >= pi_drop
    Tensor sample(logits.shape());
    Tensor edges({n, logits.dim(1)});
    const Tensor& pi = logits.value();
    for (std::size_t r = 0; r < edges.size(); ++r) {
      const bool keep = pi[2 * r] >= pi[2 * r + 1];
      edges[r] = keep ? 1.0 : 0.0;
      sample[2 * r] = keep ? 1.0 : 0.0;
      sample[2 * r + 1] = keep ? 0.0 : 1.0;
    }
    g.sample = tape.constant(std::move(sample));
    g.edges = tape.constant(std::move(edges));
    return g;
  }

  if (noise.shape() != logits.shape()) throw ShapeError("gumbel_relevance: noise shape mismatch");
  Var soft = softmax(scale(add_const(logits, noise), 1.0 / tau), -1);
  g.sample = mode == GumbelMode::Soft ? soft : straight_through(soft, one_hot_argmax(soft.value()));
  g.edges = reshape(slice(g.sample, 2, 0, 1), {n, logits.dim(1)});
  return g;
}

}  // namespace dsa
