#pragma once

#include "dsatrack/autograd.hpp"
#include "dsatrack/correlation.hpp"
#include "dsatrack/rng.hpp"

namespace dsa {

/// How node degrees are taken when normalizing the relevance graph.
enum class DegreeMode {
  SelfLoop,  ///< degrees of E + I; always invertible
  Literal,   ///< degrees of E alone; an isolated node is an error
};

struct NormalizedAdjacency {
  Var matrix;  ///< [N_z, N_z]
};

/// A = D^-1/2 (E + I) D^-1/2, differentiable with respect to E.
NormalizedAdjacency normalize_adjacency(Var edges, DegreeMode mode = DegreeMode::SelfLoop);

/// l x l head-mixing matrix applied pointwise over (N_x, N_z).
struct HeadMixer {
  Tensor weight;

  /// Identity plus N(0, sigma^2) noise.
  static HeadMixer init(std::int64_t heads, RngStream& rng, double sigma = 0.02);
};

/// C'[i, j, h'] = sum_h sum_k C[i, k, h] A[j, k] W[h, h']: each search row's
/// template profile is diffused over the graph, then heads are mixed.
CorrelationMap semantic_correlation(const NormalizedAdjacency& adj, const CorrelationMap& c, Var head_mixer);

}  // namespace dsa
