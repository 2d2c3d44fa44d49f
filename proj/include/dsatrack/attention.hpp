#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dsatrack/autograd.hpp"
#include "dsatrack/correlation.hpp"
#include "dsatrack/relevance.hpp"
#include "dsatrack/rng.hpp"
#include "dsatrack/semantic.hpp"

namespace dsa {

struct ModelDims {
  std::int64_t d_model = 192;
  std::int64_t heads = 3;
  std::int64_t d_k() const { return d_model / heads; }
};

struct LayerNormParams {
  Tensor gamma, beta;
  static LayerNormParams init(std::int64_t d);
};

enum class BlockKind { Standard, Dsa };
const char* to_string(BlockKind kind);

/// Parameters only present on dynamic semantic-aware blocks.
struct DsaParams {
  TinyMlp edge_mlp;        ///< relevance logits, heads -> 2
  TinyMlp importance_mlp;  ///< token importance, heads -> 2
  HeadMixer mixer;
};

struct BlockParams {
  std::int64_t heads = 0;
  LayerNormParams norm1, norm2;
  Tensor w_qkv, b_qkv;  ///< [d, 3d]; columns are (q|k|v), each head-major
  Tensor w_out, b_out;
  Tensor w_fc1, b_fc1;  ///< d -> 4d
  Tensor w_fc2, b_fc2;  ///< 4d -> d
  std::optional<DsaParams> dsa;

  static BlockParams init(const ModelDims& dims, BlockKind kind, RngStream& rng);
  void visit(const std::string& prefix, const std::function<void(const std::string&, Tensor&)>& fn);
};

/// Template and search tokens flowing through the backbone.
struct TokenSet {
  Var z;                            ///< [N_z_alive, d]
  Var x;                            ///< [N_x, d]
  std::vector<std::int64_t> alive;  ///< original template positions of z's rows, increasing
  std::int64_t n_z_original = 0;
  int layer = 0;
};

TokenSet make_token_set(Var z, Var x);

enum class RunMode { Train, Infer };

struct BlockOptions {
  RunMode mode = RunMode::Infer;
  double tau = 1.0;
  DegreeMode degree = DegreeMode::SelfLoop;
  RngStream* rng = nullptr;      ///< required in Train mode
  std::int64_t keep = -1;        ///< template tokens to retain; negative keeps all
};

struct ImportanceResult {
  std::vector<std::int64_t> keep;  ///< ascending positions into the current template rows
  Var logits;                      ///< [N_z, 2] log-probabilities (keep, drop)
  std::optional<Var> multiplier;   ///< [k] straight-through keep weights, Train mode only
};

/// Per-token keep logits from the mean of C' over search rows. Inference keeps
/// the top k_keep by keep-logit (ties to the lower index); training keeps the
/// top k_keep of a Gumbel-perturbed relaxation and returns a straight-through
/// multiplier that is 1 in the forward pass.
ImportanceResult token_importance(const CorrelationMap& c_prime, const TinyMlp& mlp, std::int64_t k_keep,
                                  RunMode mode, double tau, RngStream* rng, ParamBinder& params);

/// Per-head projections, each [l, N, d_k].
struct HeadProjections {
  Var q, k, v;
};

/// softmax(q k^T / sqrt(d_k) + key_bias) v, key_bias broadcast over queries.
Var self_attention(const HeadProjections& p, const Tensor* key_bias = nullptr);

/// softmax over template tokens of (C' + C), applied to v_z: [l, N_x, d_k].
Var cross_attention(const CorrelationMap& c, const CorrelationMap& c_prime, Var v_z, const Tensor* key_bias = nullptr);

/// Template rows get SelfAttention(z); search rows get SelfAttention(x) plus
/// CrossAttention(x -> z). Returns the heads concatenated, rows ordered [z; x],
/// shape [N_z + N_x, l * d_k]. `template_key_bias` ([N_z]) is added to every
/// logit that attends to a template key.
Var hybrid_attention(const HeadProjections& z, const HeadProjections& x, const CorrelationMap& c,
                     const CorrelationMap& c_prime, const Tensor* template_key_bias = nullptr);

/// Intermediate products of a DSA block, for inspection.
struct BlockTrace {
  std::optional<CorrelationMap> correlation;
  std::optional<CorrelationMap> semantic;
  std::optional<RelevanceGraph> relevance;
  std::optional<ImportanceResult> importance;
};

TokenSet block_forward(const TokenSet& tokens, const BlockParams& params, BlockKind kind, const BlockOptions& options,
                       ParamBinder& binder, BlockTrace* trace = nullptr);

/// Pre-norm MLP sublayer with its residual: t + fc2(gelu(fc1(LN(t)))).
Var feed_forward(Var t, const BlockParams& params, ParamBinder& binder);

/// Splits [N, 3d] fused projections into head-major q, k, v.
HeadProjections split_heads(Var qkv, std::int64_t heads);

}  // namespace dsa
