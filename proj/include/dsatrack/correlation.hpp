#pragma once

#include <cstdint>

#include "dsatrack/autograd.hpp"

namespace dsa {

/// Multi-head correlation volume between search queries and template keys,
/// laid out [n_x, n_z, heads].
struct CorrelationMap {
  Var values;
  std::int64_t n_x = 0;
  std::int64_t n_z = 0;
  std::int64_t heads = 0;
  std::int64_t d_k = 0;
};

/// values[i, j, h] = <q_x[i, :, h], k_z[j, :, h]> / sqrt(d_k).
/// q_x is [N_x, d_k, l] and k_z is [N_z, d_k, l]; several templates are
/// concatenated along the token axis before the call.
CorrelationMap correlation_map(Var q_x, Var k_z);

/// Row-major flattening of the [h_x, w_x, h_z, w_z, l] grid form.
CorrelationMap flatten_grid(Var grid);
Var unflatten_grid(const CorrelationMap& c, std::int64_t h_x, std::int64_t w_x, std::int64_t h_z, std::int64_t w_z);

/// Converts head-major [l, N, d_k] projections into the [N, d_k, l] layout.
Var to_token_feature_head(Var head_major);

/// [n_x, n_z, l] -> [l, n_x, n_z], the layout attention consumes.
Var to_head_major(const CorrelationMap& c);

/// Keeps only the listed template columns.
CorrelationMap select_templates(const CorrelationMap& c, std::vector<std::int64_t> keep);

}  // namespace dsa
