#include "dsatrack/gradsuite.hpp"

#include "dsatrack/attention.hpp"
#include "dsatrack/head.hpp"

namespace dsa {

namespace {

// fixed random weighting so symmetric terms cannot cancel in the scalar
Var weighted_sum(Tape& t, Var v, RngStream& rng) { return sum(mul(v, t.constant(rng.normal_tensor(v.shape(), 1.0)))); }

}  // namespace

std::vector<GradCheckResult> gradient_suite(std::uint64_t seed) {
  RngStream rng(seed);
  std::vector<GradCheckResult> out;
  const std::int64_t nx = 12, nz = 6, l = 3, dk = 4;

  {
    const Tensor w = rng.normal_tensor({nx, nz, l}, 1.0);
    out.push_back(check_gradients(
        "correlation",
        [&](Tape& t, std::span<const Var> in) { return sum(mul(correlation_map(in[0], in[1]).values, t.constant(w))); },
        {rng.normal_tensor({nx, dk, l}, 1.0), rng.normal_tensor({nz, dk, l}, 1.0)}));
  }
  {
    const Tensor w = rng.normal_tensor({nx, nz, l}, 1.0);
    Tensor edges({nz, nz});
    for (double& e : edges.data()) e = rng.uniform(0.05, 1.0);
    out.push_back(check_gradients(
        "semantic",
        [&](Tape& t, std::span<const Var> in) {
          const CorrelationMap c{in[1], nx, nz, l, dk};
          const CorrelationMap cp = semantic_correlation(normalize_adjacency(in[0]), c, in[2]);
          return sum(mul(cp.values, t.constant(w)));
        },
        {edges, rng.normal_tensor({nx, nz, l}, 1.0), rng.normal_tensor({l, l}, 0.5)}));
  }
  {
    const Tensor noise = rng.gumbel_tensor({nz, nz, 2});
    const Tensor w = rng.normal_tensor({nz, nz, 2}, 1.0);
    Tensor logits = rng.normal_tensor({nz, nz, 2}, 1.0);
    out.push_back(check_gradients(
        "gumbel-soft",
        [&](Tape& t, std::span<const Var> in) {
          const RelevanceGraph g = gumbel_relevance_with_noise(log_softmax(in[0], -1), 0.7, GumbelMode::Soft, noise);
          return sum(mul(g.sample, t.constant(w)));
        },
        {logits}));
  }
  {
    const std::int64_t kz = 5, kx = 7;
    std::vector<Tensor> inputs;
    for (int i = 0; i < 3; ++i) inputs.push_back(rng.normal_tensor({l, kz, dk}, 1.0));
    for (int i = 0; i < 3; ++i) inputs.push_back(rng.normal_tensor({l, kx, dk}, 1.0));
    inputs.push_back(rng.normal_tensor({kx, kz, l}, 1.0));
    inputs.push_back(rng.normal_tensor({kx, kz, l}, 1.0));
    RngStream wr = rng.fork();
    out.push_back(check_gradients(
        "hybrid-attention",
        [&](Tape& t, std::span<const Var> in) {
          RngStream local = wr;
          const HeadProjections z{in[0], in[1], in[2]}, x{in[3], in[4], in[5]};
          const CorrelationMap c{in[6], kx, kz, l, dk}, cp{in[7], kx, kz, l, dk};
          return weighted_sum(t, hybrid_attention(z, x, c, cp), local);
        },
        inputs));
  }
  {
    const ModelDims dims{6, 3};
    const BlockParams p = BlockParams::init(dims, BlockKind::Standard, rng);
    RngStream wr = rng.fork();
    out.push_back(check_gradients(
        "ffn",
        [&](Tape& t, std::span<const Var> in) {
          RngStream local = wr;
          // parameters enter as inputs so their gradients are checked too
          Var h = layer_norm(in[0], in[1], in[2]);
          h = gelu(linear(h, in[3], in[4]));
          Var y = add(in[0], linear(h, in[5], in[6]));
          ParamBinder b(t);
          Var ref = feed_forward(in[0], p, b);
          return add(weighted_sum(t, y, local), weighted_sum(t, ref, local));
        },
        {rng.normal_tensor({5, 6}, 1.0), add(Tensor({6}, 1.0), rng.normal_tensor({6}, 0.1)),
         rng.normal_tensor({6}, 0.1), p.w_fc1, rng.normal_tensor({24}, 0.1), p.w_fc2, rng.normal_tensor({6}, 0.1)}));
  }
  {
    const Tensor target = gaussian_target(6, 6, {2, 3});
    out.push_back(check_gradients(
        "focal-loss", [&](Tape&, std::span<const Var> in) { return focal_loss(in[0], target); },
        {rng.normal_tensor({6, 6, 1}, 1.0)}));
  }
  {
    const BBox gt{0.45, 0.52, 0.3, 0.2};
    const Tensor p = Tensor::from({4}, {0.5, 0.48, 0.25, 0.3});
    out.push_back(check_gradients("l1-loss", [&](Tape&, std::span<const Var> in) { return l1_loss(in[0], gt); }, {p}));
    out.push_back(
        check_gradients("giou-loss", [&](Tape&, std::span<const Var> in) { return giou_loss(in[0], gt); }, {p}));
  }
  return out;
}

}  // namespace dsa
