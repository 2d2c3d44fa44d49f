#pragma once

#include <string>
#include <vector>

#include "dsatrack/autograd.hpp"
#include "dsatrack/correlation.hpp"
#include "dsatrack/rng.hpp"

namespace dsa {

/// Two affine layers with GELU between: in -> 2*in -> 2.
struct TinyMlp {
  Tensor w1, b1, w2, b2;

  static TinyMlp init(std::int64_t in, RngStream& rng);
  std::int64_t input_width() const { return w1.dim(0); }
};

/// mlp(x) over the last axis of x, which must equal the MLP input width.
Var apply_mlp(const TinyMlp& mlp, Var x, ParamBinder& params);

enum class GumbelMode { Soft, HardStraightThrough, DeterministicArgmax };

struct RelevanceGraph {
  Var edges;    ///< [N_z, N_z]: keep channel of the (relaxed) sample; binary unless Soft
  Var sample;   ///< [N_z, N_z, 2]: full two-way categorical sample
  Var logits;   ///< [N_z, N_z, 2]: log-probabilities (keep, drop)
  double tau = 1.0;
  GumbelMode mode = GumbelMode::DeterministicArgmax;
};

/// Mean over the search axis: v[j, 0, h] = (1/N_x) sum_i c[i, j, h].
Var pool_nodes(const CorrelationMap& c);

/// Per-head outer product over the node axis: A[i, j, h] = v[i, 0, h] * v[j, 0, h].
Var node_similarity(Var v);

/// log_softmax(mlp(A[i, j, :])) over the (keep, drop) axis.
Var relevance_logits(Var a, const TinyMlp& mlp, ParamBinder& params);

/// Gumbel-softmax sampling of the binary relevance graph.
RelevanceGraph gumbel_relevance(Var logits, double tau, GumbelMode mode, RngStream& rng);
/// Same with caller-supplied Gumbel noise of the logits' shape.
RelevanceGraph gumbel_relevance_with_noise(Var logits, double tau, GumbelMode mode, const Tensor& noise);

/// One-hot argmax along the last axis, lowest index wins ties.
Tensor one_hot_argmax(const Tensor& x);

}  // namespace dsa
