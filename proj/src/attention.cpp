#include "dsatrack/attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dsa {

namespace {

Tensor broadcast_key_bias(const Tensor& bias, std::int64_t heads, std::int64_t queries) {
  const std::int64_t keys = static_cast<std::int64_t>(bias.size());
  Tensor out({heads, queries, keys});
  for (std::int64_t h = 0; h < heads; ++h)
    for (std::int64_t q = 0; q < queries; ++q) std::copy_n(bias.ptr(), keys, out.ptr() + (h * queries + q) * keys);
  return out;
}

/// [l, N, d_k] -> [N, l * d_k]
Var merge_heads(Var head_major) {
  const std::int64_t l = head_major.dim(0), n = head_major.dim(1), dk = head_major.dim(2);
  return reshape(permute(head_major, {1, 0, 2}), {n, l * dk});
}

HeadProjections select_tokens(const HeadProjections& p, std::int64_t begin, std::int64_t end) {
  return {slice(p.q, 1, begin, end), slice(p.k, 1, begin, end), slice(p.v, 1, begin, end)};
}

HeadProjections gather_tokens(const HeadProjections& p, const std::vector<std::int64_t>& idx) {
  return {index_select(p.q, 1, idx), index_select(p.k, 1, idx), index_select(p.v, 1, idx)};
}

std::vector<std::int64_t> top_k_ascending(const std::vector<double>& score, std::int64_t k) {
  std::vector<std::int64_t> order(score.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) { return score[a] > score[b]; });
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

}  // namespace

Var feed_forward(Var t, const BlockParams& p, ParamBinder& b) {
  Var h = layer_norm(t, b(p.norm2.gamma), b(p.norm2.beta));
  h = gelu(linear(h, b(p.w_fc1), b(p.b_fc1)));
  return add(t, linear(h, b(p.w_fc2), b(p.b_fc2)));
}

const char* to_string(BlockKind kind) { return kind == BlockKind::Dsa ? "dsa" : "standard"; }

LayerNormParams LayerNormParams::init(std::int64_t d) { return {Tensor({d}, 1.0), Tensor({d}, 0.0)}; }

BlockParams BlockParams::init(const ModelDims& dims, BlockKind kind, RngStream& rng) {
  const std::int64_t d = dims.d_model;
  if (d % dims.heads != 0) throw ValidationError("d_model must be divisible by the head count");
  constexpr double kStd = 0.02;
  BlockParams p;
  p.heads = dims.heads;
  p.norm1 = LayerNormParams::init(d);
  p.norm2 = LayerNormParams::init(d);
  p.w_qkv = rng.normal_tensor({d, 3 * d}, kStd);
  p.b_qkv = Tensor({3 * d});
  p.w_out = rng.normal_tensor({d, d}, kStd);
  p.b_out = Tensor({d});
  p.w_fc1 = rng.normal_tensor({d, 4 * d}, kStd);
  p.b_fc1 = Tensor({4 * d});
  p.w_fc2 = rng.normal_tensor({4 * d, d}, kStd);
  p.b_fc2 = Tensor({d});
  if (kind == BlockKind::Dsa) {
    DsaParams dsa_params{TinyMlp::init(dims.heads, rng), TinyMlp::init(dims.heads, rng), HeadMixer::init(dims.heads, rng)};
    p.dsa = std::move(dsa_params);
  }
  return p;
}

void BlockParams::visit(const std::string& prefix, const std::function<void(const std::string&, Tensor&)>& fn) {
  fn(prefix + "norm1.gamma", norm1.gamma);
  fn(prefix + "norm1.beta", norm1.beta);
  fn(prefix + "attn.w_qkv", w_qkv);
  fn(prefix + "attn.b_qkv", b_qkv);
  fn(prefix + "attn.w_out", w_out);
  fn(prefix + "attn.b_out", b_out);
  fn(prefix + "norm2.gamma", norm2.gamma);
  fn(prefix + "norm2.beta", norm2.beta);
  fn(prefix + "ffn.w_fc1", w_fc1);
  fn(prefix + "ffn.b_fc1", b_fc1);
  fn(prefix + "ffn.w_fc2", w_fc2);
  fn(prefix + "ffn.b_fc2", b_fc2);
  if (dsa) {
    auto mlp = [&](const std::string& name, TinyMlp& m) {
      fn(prefix + name + ".w1", m.w1);
      fn(prefix + name + ".b1", m.b1);
      fn(prefix + name + ".w2", m.w2);
      fn(prefix + name + ".b2", m.b2);
    };
    mlp("dsa.edge_mlp", dsa->edge_mlp);
    mlp("dsa.importance_mlp", dsa->importance_mlp);
    fn(prefix + "dsa.head_mixer", dsa->mixer.weight);
  }
}

TokenSet make_token_set(Var z, Var x) {
  TokenSet t;
  t.z = z;
  t.x = x;
  t.n_z_original = z.dim(0);
  t.alive.resize(static_cast<std::size_t>(t.n_z_original));
  std::iota(t.alive.begin(), t.alive.end(), 0);
  return t;
}

ImportanceResult token_importance(const CorrelationMap& c_prime, const TinyMlp& mlp, std::int64_t k_keep,
                                  RunMode mode, double tau, RngStream* rng, ParamBinder& params) {
  const std::int64_t n = c_prime.n_z;
  if (k_keep <= 0) throw ValidationError("token_importance: k_keep must be positive");
  if (k_keep > n) throw ValidationError("token_importance: k_keep exceeds alive template tokens");

  ImportanceResult r;
  Var pooled = mean_axis(c_prime.values, 0, false);  // [N_z, l]
  r.logits = log_softmax(apply_mlp(mlp, pooled, params), -1);

  if (mode == RunMode::Infer) {
    std::vector<double> keep_logit(static_cast<std::size_t>(n));
    for (std::int64_t j = 0; j < n; ++j) keep_logit[j] = r.logits.value()[2 * j];
    r.keep = top_k_ascending(keep_logit, k_keep);
    return r;
  }

  if (!rng) throw ValidationError("token_importance: training mode needs an RngStream");
  if (!(tau > 0.0)) throw ValidationError("token_importance: temperature must be positive");
  Var soft = softmax(scale(add_const(r.logits, rng->gumbel_tensor(r.logits.shape())), 1.0 / tau), -1);
  std::vector<double> keep_prob(static_cast<std::size_t>(n));
  for (std::int64_t j = 0; j < n; ++j) keep_prob[j] = soft.value()[2 * j];
  r.keep = top_k_ascending(keep_prob, k_keep);
  Var kept = reshape(slice(index_select(soft, 0, r.keep), 1, 0, 1), {k_keep});
  r.multiplier = straight_through(kept, Tensor({k_keep}, 1.0));
  return r;
}

HeadProjections split_heads(Var qkv, std::int64_t heads) {
  const std::int64_t n = qkv.dim(0), d3 = qkv.dim(1);
  const std::int64_t dk = d3 / 3 / heads;
  Var grouped = permute(reshape(qkv, {n, 3, heads, dk}), {1, 2, 0, 3});  // [3, l, N, d_k]
  auto part = [&](std::int64_t i) { return reshape(slice(grouped, 0, i, i + 1), {heads, n, dk}); };
  return {part(0), part(1), part(2)};
}

Var self_attention(const HeadProjections& p, const Tensor* key_bias) {
  const std::int64_t heads = p.q.dim(0), nq = p.q.dim(1), dk = p.q.dim(2);
  if (p.k.dim(2) != dk || p.v.dim(1) != p.k.dim(1)) throw ShapeError("self_attention: projection shapes disagree");
  Var logits = scale(matmul(p.q, transpose_last2(p.k)), 1.0 / std::sqrt(static_cast<double>(dk)));
  if (key_bias) {
    if (static_cast<std::int64_t>(key_bias->size()) != p.k.dim(1)) throw ShapeError("self_attention: key bias length");
    logits = add_const(logits, broadcast_key_bias(*key_bias, heads, nq));
  }
  return matmul(softmax(logits, -1), p.v);
}

Var cross_attention(const CorrelationMap& c, const CorrelationMap& c_prime, Var v_z, const Tensor* key_bias) {
  if (c.n_x != c_prime.n_x || c.n_z != c_prime.n_z || c.heads != c_prime.heads) {
    throw ShapeError("cross_attention: C and C' dimensions differ");
  }
  if (v_z.rank() != 3 || v_z.dim(0) != c.heads || v_z.dim(1) != c.n_z) {
    throw ShapeError("cross_attention: template values " + shape_str(v_z.shape()) + " do not match the maps");
  }
  Var logits = permute(add(c_prime.values, c.values), {2, 0, 1});  // [l, N_x, N_z]
  if (key_bias) {
    if (static_cast<std::int64_t>(key_bias->size()) != c.n_z) throw ShapeError("cross_attention: key bias length");
    logits = add_const(logits, broadcast_key_bias(*key_bias, c.heads, c.n_x));
  }
  return matmul(softmax(logits, -1), v_z);
}

Var hybrid_attention(const HeadProjections& z, const HeadProjections& x, const CorrelationMap& c,
                     const CorrelationMap& c_prime, const Tensor* template_key_bias) {
  if (z.q.dim(1) != c.n_z || x.q.dim(1) != c.n_x) {
    throw ShapeError("hybrid_attention: maps cover " + std::to_string(c.n_x) + "x" + std::to_string(c.n_z) +
                     " tokens but projections have " + std::to_string(x.q.dim(1)) + "x" + std::to_string(z.q.dim(1)));
  }
  Var z_out = self_attention(z, template_key_bias);
  Var x_out = add(self_attention(x), cross_attention(c, c_prime, z.v, template_key_bias));
  return merge_heads(concat(std::vector<Var>{z_out, x_out}, 1));
}

TokenSet block_forward(const TokenSet& tokens, const BlockParams& params, BlockKind kind, const BlockOptions& options,
                       ParamBinder& b, BlockTrace* trace) {
  const std::int64_t nz = tokens.z.dim(0), nx = tokens.x.dim(0);
  if (kind == BlockKind::Dsa && !params.dsa) throw ValidationError("block_forward: DSA block without DSA parameters");
  if (static_cast<std::int64_t>(tokens.alive.size()) != nz) throw ValidationError("block_forward: alive list out of sync");

  Var t = concat(std::vector<Var>{tokens.z, tokens.x}, 0);
  Var h = layer_norm(t, b(params.norm1.gamma), b(params.norm1.beta));
  const HeadProjections all = split_heads(linear(h, b(params.w_qkv), b(params.b_qkv)), params.heads);

  TokenSet out;
  out.n_z_original = tokens.n_z_original;
  out.layer = tokens.layer + 1;

  if (kind == BlockKind::Standard) {
    Var attn = linear(merge_heads(self_attention(all)), b(params.w_out), b(params.b_out));
    Var t2 = feed_forward(add(t, attn), params, b);
    out.z = slice(t2, 0, 0, nz);
    out.x = slice(t2, 0, nz, nz + nx);
    out.alive = tokens.alive;
    return out;
  }

  const DsaParams& dp = *params.dsa;
  HeadProjections zp = select_tokens(all, 0, nz);
  const HeadProjections xp = select_tokens(all, nz, nz + nx);

  CorrelationMap c = correlation_map(to_token_feature_head(xp.q), to_token_feature_head(zp.k));
  Var pi = relevance_logits(node_similarity(pool_nodes(c)), dp.edge_mlp, b);
  const bool train = options.mode == RunMode::Train;
  if (train && !options.rng) throw ValidationError("block_forward: training mode needs an RngStream");
  RngStream scratch(0);
  RngStream& rng = options.rng ? *options.rng : scratch;
  RelevanceGraph graph =
      gumbel_relevance(pi, options.tau, train ? GumbelMode::HardStraightThrough : GumbelMode::DeterministicArgmax, rng);
  const NormalizedAdjacency adj = normalize_adjacency(graph.edges, options.degree);
  CorrelationMap c_prime = semantic_correlation(adj, c, b(dp.mixer.weight));

  const std::int64_t keep = options.keep < 0 ? nz : std::min(options.keep, nz);
  ImportanceResult imp = token_importance(c_prime, dp.importance_mlp, keep, options.mode, options.tau, options.rng, b);

  Var z_res = tokens.z;
  out.alive = tokens.alive;
  if (keep < nz) {
    zp = gather_tokens(zp, imp.keep);
    c = select_templates(c, imp.keep);
    c_prime = select_templates(c_prime, imp.keep);
    z_res = index_select(tokens.z, 0, imp.keep);
    out.alive.clear();
    for (auto j : imp.keep) out.alive.push_back(tokens.alive[static_cast<std::size_t>(j)]);
  }
  if (imp.multiplier) z_res = scale_rows(z_res, *imp.multiplier);

  Var attn = linear(hybrid_attention(zp, xp, c, c_prime), b(params.w_out), b(params.b_out));
  Var t1 = add(concat(std::vector<Var>{z_res, tokens.x}, 0), attn);
  Var t2 = feed_forward(t1, params, b);
  out.z = slice(t2, 0, 0, keep);
  out.x = slice(t2, 0, keep, keep + nx);

  if (trace) {
    trace->correlation = c;
    trace->semantic = c_prime;
    trace->relevance = graph;
    trace->importance = imp;
  }
  return out;
}

}  // namespace dsa
