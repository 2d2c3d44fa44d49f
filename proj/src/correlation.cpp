#include "dsatrack/correlation.hpp"

#include <cmath>

namespace dsa {

CorrelationMap correlation_map(Var q_x, Var k_z) {
  if (q_x.rank() != 3 || k_z.rank() != 3) {
    throw ShapeError("correlation_map: expected [N, d_k, l] inputs, got " + shape_str(q_x.shape()) + " and " +
                     shape_str(k_z.shape()));
  }
  const std::int64_t d_k = q_x.dim(1), heads = q_x.dim(2);
  if (k_z.dim(1) != d_k || k_z.dim(2) != heads) {
    throw ShapeError("correlation_map: feature/head mismatch " + shape_str(q_x.shape()) + " vs " +
                     shape_str(k_z.shape()));
  }
  Var q = permute(q_x, {2, 0, 1});  // [l, N_x, d_k]
  Var k = permute(k_z, {2, 1, 0});  // [l, d_k, N_z]
  Var logits = scale(matmul(q, k), 1.0 / std::sqrt(static_cast<double>(d_k)));
  return {permute(logits, {1, 2, 0}), q_x.dim(0), k_z.dim(0), heads, d_k};
}

CorrelationMap flatten_grid(Var grid) {
  if (grid.rank() != 5) throw ShapeError("flatten_grid: expected [h_x, w_x, h_z, w_z, l], got " + shape_str(grid.shape()));
  const auto& s = grid.shape();
  const std::int64_t n_x = s[0] * s[1], n_z = s[2] * s[3];
  return {reshape(grid, {n_x, n_z, s[4]}), n_x, n_z, s[4], 0};
}

Var unflatten_grid(const CorrelationMap& c, std::int64_t h_x, std::int64_t w_x, std::int64_t h_z, std::int64_t w_z) {
  if (h_x * w_x != c.n_x || h_z * w_z != c.n_z) throw ShapeError("unflatten_grid: grid does not match token counts");
  return reshape(c.values, {h_x, w_x, h_z, w_z, c.heads});
}

Var to_token_feature_head(Var head_major) {
  if (head_major.rank() != 3) throw ShapeError("to_token_feature_head: expected [l, N, d_k]");
  return permute(head_major, {1, 2, 0});
}

Var to_head_major(const CorrelationMap& c) { return permute(c.values, {2, 0, 1}); }

CorrelationMap select_templates(const CorrelationMap& c, std::vector<std::int64_t> keep) {
  CorrelationMap out = c;
  out.n_z = static_cast<std::int64_t>(keep.size());
  out.values = index_select(c.values, 1, std::move(keep));
  return out;
}

}  // namespace dsa
