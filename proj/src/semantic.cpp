#include "dsatrack/semantic.hpp"

#include <cmath>

namespace dsa {

NormalizedAdjacency normalize_adjacency(Var edges, DegreeMode mode) {
  if (edges.rank() != 2 || edges.dim(0) != edges.dim(1)) {
    throw ShapeError("normalize_adjacency: expected square [N_z, N_z], got " + shape_str(edges.shape()));
  }
  const std::int64_t n = edges.dim(0);
  const Tensor& e = edges.value();
  Tensor e_hat = e;
  for (std::int64_t i = 0; i < n; ++i) e_hat[i * n + i] += 1.0;
  const Tensor& deg_src = mode == DegreeMode::SelfLoop ? e_hat : e;
  std::vector<double> deg(static_cast<std::size_t>(n), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < n; ++j) deg[i] += deg_src[i * n + j];
    if (!(deg[i] > 0.0)) {
      throw NumericalError("normalize_adjacency: node " + std::to_string(i) + " has zero degree");
    }
  }
  std::vector<double> s(deg.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = 1.0 / std::sqrt(deg[i]);

  Tensor a({n, n});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j) a[i * n + j] = e_hat[i * n + j] * s[i] * s[j];

  Var out = edges.tape().record(
      std::move(a), {edges},
      [edges, n, s, deg, e_hat](const Tensor& g, const Tensor&) {
        // A_ij = Ê_ij s_i s_j with s = deg^-1/2 and deg a row sum of Ê (or E).
        Tensor ge({n, n});
        std::vector<double> gs(static_cast<std::size_t>(n), 0.0);
        for (std::int64_t i = 0; i < n; ++i) {
          for (std::int64_t j = 0; j < n; ++j) {
            const double gij = g[i * n + j];
            ge[i * n + j] = gij * s[i] * s[j];
            gs[i] += gij * e_hat[i * n + j] * s[j];
            gs[j] += gij * e_hat[i * n + j] * s[i];
          }
        }
        for (std::int64_t i = 0; i < n; ++i) {
          const double gdeg = gs[i] * -0.5 * s[i] / deg[i];
          for (std::int64_t j = 0; j < n; ++j) ge[i * n + j] += gdeg;
        }
        edges.tape().accumulate(edges, std::move(ge));
      },
      "normalize_adjacency");
  return {out};
}

HeadMixer HeadMixer::init(std::int64_t heads, RngStream& rng, double sigma) {
  HeadMixer m{rng.normal_tensor({heads, heads}, sigma)};
  for (std::int64_t h = 0; h < heads; ++h) m.weight[h * heads + h] += 1.0;
  return m;
}

CorrelationMap semantic_correlation(const NormalizedAdjacency& adj, const CorrelationMap& c, Var head_mixer) {
  const std::int64_t n = c.n_z;
  if (adj.matrix.rank() != 2 || adj.matrix.dim(0) != n || adj.matrix.dim(1) != n) {
    throw ShapeError("semantic_correlation: adjacency " + shape_str(adj.matrix.shape()) + " vs " + std::to_string(n) +
                     " template tokens");
  }
  if (head_mixer.rank() != 2 || head_mixer.dim(0) != c.heads || head_mixer.dim(1) != c.heads) {
    throw ShapeError("semantic_correlation: head mixer must be " + std::to_string(c.heads) + "x" + std::to_string(c.heads));
  }
  Var per_head = permute(c.values, {2, 0, 1});                         // [l, N_x, N_z]
  Var diffused = matmul(per_head, transpose_last2(adj.matrix));        // row . A^T
  Var token_major = permute(diffused, {1, 2, 0});                      // [N_x, N_z, l]
  Var mixed = matmul(reshape(token_major, {c.n_x * n, c.heads}), head_mixer);
  CorrelationMap out = c;
  out.values = reshape(mixed, {c.n_x, n, c.heads});
  return out;
}

}  // namespace dsa
