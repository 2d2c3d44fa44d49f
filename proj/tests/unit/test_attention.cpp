#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "dsatrack/attention.hpp"
#include "dsatrack/gradcheck.hpp"
#include "dsatrack/kernels.hpp"

using namespace dsa;

namespace {

HeadProjections random_heads(Tape& tape, RngStream& rng, std::int64_t l, std::int64_t n, std::int64_t dk) {
  return {tape.constant(rng.normal_tensor({l, n, dk}, 1.0)), tape.constant(rng.normal_tensor({l, n, dk}, 1.0)),
          tape.constant(rng.normal_tensor({l, n, dk}, 1.0))};
}

CorrelationMap random_map(Tape& tape, RngStream& rng, std::int64_t nx, std::int64_t nz, std::int64_t l) {
  return {tape.constant(rng.normal_tensor({nx, nz, l}, 1.0)), nx, nz, l, 4};
}

// l = 1 importance MLP whose keep-logit increases with its input
TinyMlp increasing_mlp() {
  return {Tensor::from({1, 2}, {1, 0}), Tensor({2}), Tensor::from({2, 2}, {1, 0, 0, 0}), Tensor({2})};
}

CorrelationMap column_map(Tape& tape, const std::vector<double>& column_values, std::int64_t nx = 3) {
  const auto nz = static_cast<std::int64_t>(column_values.size());
  Tensor v({nx, nz, 1});
  for (std::int64_t i = 0; i < nx; ++i)
    for (std::int64_t j = 0; j < nz; ++j) v.at({i, j, 0}) = column_values[j];
  return {tape.constant(v), nx, nz, 1, 1};
}

void zero_residual_branches(BlockParams& p) {
  for (Tensor* t : {&p.w_out, &p.b_out, &p.w_fc2, &p.b_fc2}) std::fill(t->data().begin(), t->data().end(), 0.0);
}

// drop every edge in deterministic mode so that Â = I
void force_empty_graph(BlockParams& p) {
  auto& m = p.dsa->edge_mlp;
  std::fill(m.w2.data().begin(), m.w2.data().end(), 0.0);
  m.b2 = Tensor::from({2}, {-10.0, 10.0});
  p.dsa->mixer.weight = Tensor::identity(p.dsa->mixer.weight.dim(0));
}

Var feed_forward_ref(Var t, const BlockParams& p, ParamBinder& b) {
  Var h = layer_norm(t, b(p.norm2.gamma), b(p.norm2.beta));
  h = gelu(linear(h, b(p.w_fc1), b(p.b_fc1)));
  return add(t, linear(h, b(p.w_fc2), b(p.b_fc2)));
}

}  // namespace

TEST(TokenImportance, KeepAllKeepsEverything) {
  RngStream rng(1);
  Tape tape;
  ParamBinder b(tape);
  const TinyMlp mlp = TinyMlp::init(2, rng);
  const ImportanceResult r = token_importance(random_map(tape, rng, 4, 6, 2), mlp, 6, RunMode::Infer, 1.0, nullptr, b);
  EXPECT_EQ(r.keep, (std::vector<std::int64_t>{0, 1, 2, 3, 4, 5}));
  EXPECT_FALSE(r.multiplier.has_value());
}

TEST(TokenImportance, TopKBySortOracle) {
  Tape tape;
  ParamBinder b(tape);
  const ImportanceResult r =
      token_importance(column_map(tape, {0.5, 1.0, 1.5, 2.0}), increasing_mlp(), 2, RunMode::Infer, 1.0, nullptr, b);
  EXPECT_EQ(r.keep, (std::vector<std::int64_t>{2, 3}));
  const ImportanceResult shuffled =
      token_importance(column_map(tape, {2.0, 0.5, 1.5, 1.0}), increasing_mlp(), 2, RunMode::Infer, 1.0, nullptr, b);
  EXPECT_EQ(shuffled.keep, (std::vector<std::int64_t>{0, 2}));
}

TEST(TokenImportance, TiesGoToLowerIndex) {
  Tape tape;
  ParamBinder b(tape);
  const ImportanceResult r =
      token_importance(column_map(tape, {1.0, 1.0, 1.0, 1.0}), increasing_mlp(), 2, RunMode::Infer, 1.0, nullptr, b);
  EXPECT_EQ(r.keep, (std::vector<std::int64_t>{0, 1}));
}

TEST(TokenImportance, RejectsBadCounts) {
  Tape tape;
  ParamBinder b(tape);
  const CorrelationMap c = column_map(tape, {1.0, 2.0});
  EXPECT_THROW(token_importance(c, increasing_mlp(), 0, RunMode::Infer, 1.0, nullptr, b), ValidationError);
  EXPECT_THROW(token_importance(c, increasing_mlp(), 3, RunMode::Infer, 1.0, nullptr, b), ValidationError);
  EXPECT_THROW(token_importance(c, increasing_mlp(), 1, RunMode::Train, 1.0, nullptr, b), ValidationError);
}

TEST(TokenImportance, TrainingMultiplierIsOneForward) {
  RngStream rng(2), noise(3);
  Tape tape;
  ParamBinder b(tape);
  const TinyMlp mlp = TinyMlp::init(3, rng);
  const ImportanceResult r = token_importance(random_map(tape, rng, 5, 8, 3), mlp, 5, RunMode::Train, 1.0, &noise, b);
  ASSERT_EQ(r.keep.size(), 5u);
  EXPECT_TRUE(std::is_sorted(r.keep.begin(), r.keep.end()));
  ASSERT_TRUE(r.multiplier.has_value());
  for (double v : r.multiplier->value().data()) EXPECT_EQ(v, 1.0);
}

TEST(HybridAttention, SingleTemplateCopiesValue) {
  RngStream rng(4);
  Tape tape;
  const HeadProjections z = random_heads(tape, rng, 2, 1, 3);
  const CorrelationMap c = random_map(tape, rng, 5, 1, 2);
  const CorrelationMap zero{tape.constant(Tensor({5, 1, 2})), 5, 1, 2, 4};
  const Tensor out = cross_attention(c, zero, z.v).value();
  for (std::int64_t h = 0; h < 2; ++h)
    for (std::int64_t i = 0; i < 5; ++i)
      for (std::int64_t f = 0; f < 3; ++f) EXPECT_NEAR(out.at({h, i, f}), z.v.value().at({h, 0, f}), 1e-15);
}

TEST(HybridAttention, ShiftInvariant) {
  RngStream rng(5);
  Tape tape;
  const HeadProjections z = random_heads(tape, rng, 2, 4, 3);
  const CorrelationMap c = random_map(tape, rng, 5, 4, 2);
  const CorrelationMap cp = random_map(tape, rng, 5, 4, 2);
  Tensor shifted = cp.values.value();
  for (auto& v : shifted.data()) v += 3.25;
  const CorrelationMap cps{tape.constant(shifted), 5, 4, 2, 4};
  EXPECT_LT(max_abs_diff(cross_attention(c, cp, z.v).value(), cross_attention(c, cps, z.v).value()), 1e-12);
}

TEST(HybridAttention, MatchesBruteForce) {
  RngStream rng(6);
  const std::int64_t l = 2, nz = 3, nx = 3, dk = 2;
  Tape tape;
  const HeadProjections z = random_heads(tape, rng, l, nz, dk);
  const HeadProjections x = random_heads(tape, rng, l, nx, dk);
  const CorrelationMap c = random_map(tape, rng, nx, nz, l);
  const CorrelationMap cp = random_map(tape, rng, nx, nz, l);
  const Tensor out = hybrid_attention(z, x, c, cp).value();
  ASSERT_EQ(out.shape(), (Shape{nz + nx, l * dk}));

  auto attend = [&](const Tensor& q, const Tensor& k, const Tensor& v, std::int64_t h, std::int64_t i, std::int64_t f) {
    const std::int64_t n = k.dim(1);
    std::vector<double> w(static_cast<std::size_t>(n));
    double total = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::int64_t e = 0; e < dk; ++e) s += q.at({h, i, e}) * k.at({h, j, e});
      w[j] = std::exp(s / std::sqrt(static_cast<double>(dk)));
      total += w[j];
    }
    double acc = 0.0;
    for (std::int64_t j = 0; j < n; ++j) acc += w[j] / total * v.at({h, j, f});
    return acc;
  };
  for (std::int64_t h = 0; h < l; ++h)
    for (std::int64_t f = 0; f < dk; ++f) {
      for (std::int64_t i = 0; i < nz; ++i) {
        EXPECT_NEAR(out.at({i, h * dk + f}), attend(z.q.value(), z.k.value(), z.v.value(), h, i, f), 1e-10);
      }
      for (std::int64_t i = 0; i < nx; ++i) {
        double total = 0.0, acc = 0.0;
        for (std::int64_t j = 0; j < nz; ++j) total += std::exp(c.values.value().at({i, j, h}) + cp.values.value().at({i, j, h}));
        for (std::int64_t j = 0; j < nz; ++j) {
          acc += std::exp(c.values.value().at({i, j, h}) + cp.values.value().at({i, j, h})) / total * z.v.value().at({h, j, f});
        }
        const double expect = attend(x.q.value(), x.k.value(), x.v.value(), h, i, f) + acc;
        EXPECT_NEAR(out.at({nz + i, h * dk + f}), expect, 1e-10);
      }
    }
}

TEST(HybridAttention, CrossRowsInConvexHull) {
  RngStream rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const std::int64_t l = rng.uniform_int(1, 3), nz = rng.uniform_int(1, 8), nx = rng.uniform_int(1, 16);
    Tape tape;
    const Tensor v = rng.normal_tensor({l, nz, 4}, 1.0);
    const Tensor out =
        cross_attention(random_map(tape, rng, nx, nz, l), random_map(tape, rng, nx, nz, l), tape.constant(v)).value();
    for (std::int64_t h = 0; h < l; ++h)
      for (std::int64_t f = 0; f < 4; ++f) {
        double lo = 1e300, hi = -1e300;
        for (std::int64_t j = 0; j < nz; ++j) {
          lo = std::min(lo, v.at({h, j, f}));
          hi = std::max(hi, v.at({h, j, f}));
        }
        for (std::int64_t i = 0; i < nx; ++i) {
          EXPECT_GE(out.at({h, i, f}), lo - 1e-12);
          EXPECT_LE(out.at({h, i, f}), hi + 1e-12);
        }
      }
  }
}

TEST(HybridAttention, EliminationEqualsMasking) {
  RngStream rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t l = 2, nz = rng.uniform_int(2, 8), nx = rng.uniform_int(1, 6), dk = 3;
    std::vector<std::int64_t> keep;
    Tensor bias({nz});
    for (std::int64_t j = 0; j < nz; ++j) {
      if (rng.uniform() < 0.6 || (j == nz - 1 && keep.empty())) {
        keep.push_back(j);
      } else {
        bias[j] = -1e30;
      }
    }
    Tape tape;
    const HeadProjections z = random_heads(tape, rng, l, nz, dk);
    const HeadProjections x = random_heads(tape, rng, l, nx, dk);
    const CorrelationMap c = random_map(tape, rng, nx, nz, l);
    const CorrelationMap cp = random_map(tape, rng, nx, nz, l);
    const Tensor masked = hybrid_attention(z, x, c, cp, &bias).value();

    const HeadProjections zk{index_select(z.q, 1, keep), index_select(z.k, 1, keep), index_select(z.v, 1, keep)};
    const Tensor dropped =
        hybrid_attention(zk, x, select_templates(c, keep), select_templates(cp, keep)).value();
    const auto nk = static_cast<std::int64_t>(keep.size());
    double dev = 0.0;
    for (std::int64_t r = 0; r < nk; ++r)
      for (std::int64_t f = 0; f < l * dk; ++f) dev = std::max(dev, std::abs(dropped.at({r, f}) - masked.at({keep[r], f})));
    for (std::int64_t i = 0; i < nx; ++i)
      for (std::int64_t f = 0; f < l * dk; ++f)
        dev = std::max(dev, std::abs(dropped.at({nk + i, f}) - masked.at({nz + i, f})));
    EXPECT_LT(dev, 1e-10) << trial;
  }
}

TEST(HybridAttention, SearchPermutationEquivariant) {
  RngStream rng(9);
  const std::int64_t l = 2, nz = 3, nx = 4, dk = 2;
  Tape tape;
  const HeadProjections z = random_heads(tape, rng, l, nz, dk);
  const HeadProjections x = random_heads(tape, rng, l, nx, dk);
  const CorrelationMap c = random_map(tape, rng, nx, nz, l);
  const CorrelationMap cp = random_map(tape, rng, nx, nz, l);
  const std::vector<std::int64_t> perm = {2, 0, 3, 1};
  const HeadProjections xp{index_select(x.q, 1, perm), index_select(x.k, 1, perm), index_select(x.v, 1, perm)};
  const CorrelationMap c2{index_select(c.values, 0, perm), nx, nz, l, 4};
  const CorrelationMap cp2{index_select(cp.values, 0, perm), nx, nz, l, 4};
  const Tensor a = hybrid_attention(z, x, c, cp).value();
  const Tensor b = hybrid_attention(z, xp, c2, cp2).value();
  for (std::int64_t r = 0; r < nz; ++r)
    for (std::int64_t f = 0; f < l * dk; ++f) EXPECT_NEAR(b.at({r, f}), a.at({r, f}), 1e-12);
  for (std::int64_t i = 0; i < nx; ++i)
    for (std::int64_t f = 0; f < l * dk; ++f) EXPECT_NEAR(b.at({nz + i, f}), a.at({nz + perm[i], f}), 1e-12);
}

TEST(HybridAttention, RejectsMismatchedMaps) {
  RngStream rng(10);
  Tape tape;
  const HeadProjections z = random_heads(tape, rng, 2, 3, 2);
  const HeadProjections x = random_heads(tape, rng, 2, 4, 2);
  EXPECT_THROW(hybrid_attention(z, x, random_map(tape, rng, 4, 2, 2), random_map(tape, rng, 4, 2, 2)), ShapeError);
}

TEST(BlockForward, ZeroBranchesAreIdentity) {
  const ModelDims dims{12, 3};
  for (BlockKind kind : {BlockKind::Standard, BlockKind::Dsa}) {
    RngStream rng(11);
    BlockParams p = BlockParams::init(dims, kind, rng);
    zero_residual_branches(p);
    Tape tape;
    ParamBinder b(tape);
    const Tensor z = rng.normal_tensor({5, 12}, 1.0), x = rng.normal_tensor({7, 12}, 1.0);
    const TokenSet out = block_forward(make_token_set(tape.constant(z), tape.constant(x)), p, kind, {}, b);
    EXPECT_TRUE(out.z.value().bitwise_equal(z)) << to_string(kind);
    EXPECT_TRUE(out.x.value().bitwise_equal(x)) << to_string(kind);
    EXPECT_EQ(out.alive.size(), 5u);
  }
}

TEST(BlockForward, PassThroughMatchesHybridWithRawMap) {
  const ModelDims dims{12, 3};
  RngStream rng(12);
  BlockParams p = BlockParams::init(dims, BlockKind::Dsa, rng);
  force_empty_graph(p);
  Tape tape;
  ParamBinder b(tape);
  const Var z = tape.constant(rng.normal_tensor({4, 12}, 1.0)), x = tape.constant(rng.normal_tensor({6, 12}, 1.0));
  BlockTrace trace;
  const TokenSet out = block_forward(make_token_set(z, x), p, BlockKind::Dsa, {}, b, &trace);
  for (double e : trace.relevance->edges.value().data()) ASSERT_EQ(e, 0.0);

  Var t = concat(std::vector<Var>{z, x}, 0);
  Var h = layer_norm(t, b(p.norm1.gamma), b(p.norm1.beta));
  const HeadProjections all = split_heads(linear(h, b(p.w_qkv), b(p.b_qkv)), 3);
  const HeadProjections zp{slice(all.q, 1, 0, 4), slice(all.k, 1, 0, 4), slice(all.v, 1, 0, 4)};
  const HeadProjections xp{slice(all.q, 1, 4, 10), slice(all.k, 1, 4, 10), slice(all.v, 1, 4, 10)};
  const CorrelationMap c = correlation_map(to_token_feature_head(xp.q), to_token_feature_head(zp.k));
  Var attn = linear(hybrid_attention(zp, xp, c, c), b(p.w_out), b(p.b_out));
  const Tensor ref = feed_forward_ref(add(t, attn), p, b).value();
  const Tensor got = concat(std::vector<Var>{out.z, out.x}, 0).value();
  EXPECT_TRUE(got.bitwise_equal(ref)) << max_abs_diff(got, ref);
}

TEST(BlockForward, EliminationUpdatesAliveIndices) {
  const ModelDims dims{12, 3};
  RngStream rng(13);
  BlockParams p = BlockParams::init(dims, BlockKind::Dsa, rng);
  Tape tape;
  ParamBinder b(tape);
  TokenSet in = make_token_set(tape.constant(rng.normal_tensor({6, 12}, 1.0)), tape.constant(rng.normal_tensor({5, 12}, 1.0)));
  in.alive = {1, 3, 4, 7, 8, 9};
  in.n_z_original = 10;
  BlockOptions opt;
  opt.keep = 4;
  BlockTrace trace;
  const TokenSet out = block_forward(in, p, BlockKind::Dsa, opt, b, &trace);
  EXPECT_EQ(out.z.dim(0), 4);
  EXPECT_EQ(out.x.dim(0), 5);
  ASSERT_EQ(out.alive.size(), 4u);
  EXPECT_TRUE(std::is_sorted(out.alive.begin(), out.alive.end()));
  for (std::size_t r = 0; r < 4; ++r) EXPECT_EQ(out.alive[r], in.alive[static_cast<std::size_t>(trace.importance->keep[r])]);
  EXPECT_EQ(trace.correlation->n_z, 4);
}

TEST(BlockForward, TrainingModeIsSeedDeterministic) {
  const ModelDims dims{12, 3};
  RngStream init(14);
  const BlockParams p = BlockParams::init(dims, BlockKind::Dsa, init);
  const Tensor z = init.normal_tensor({6, 12}, 1.0), x = init.normal_tensor({5, 12}, 1.0);
  auto run = [&] {
    RngStream rng(42);
    Tape tape;
    ParamBinder b(tape);
    BlockOptions opt;
    opt.mode = RunMode::Train;
    opt.rng = &rng;
    opt.keep = 3;
    const TokenSet out = block_forward(make_token_set(tape.constant(z), tape.constant(x)), p, BlockKind::Dsa, opt, b);
    return std::make_pair(out.alive, hash_tensor(concat(std::vector<Var>{out.z, out.x}, 0).value()));
  };
  EXPECT_EQ(run(), run());
  BlockOptions no_rng;
  no_rng.mode = RunMode::Train;
  Tape tape;
  ParamBinder b(tape);
  EXPECT_THROW(block_forward(make_token_set(tape.constant(z), tape.constant(x)), p, BlockKind::Dsa, no_rng, b),
               ValidationError);
}

TEST(BlockForward, DsaBlockGradient) {
  const ModelDims dims{6, 3};
  RngStream rng(15);
  const BlockParams p = BlockParams::init(dims, BlockKind::Dsa, rng);
  const auto r = check_gradients(
      "dsa-block",
      [&](Tape& t, std::span<const Var> in) {
        ParamBinder b(t);
        BlockOptions opt;
        opt.keep = 3;
        const TokenSet out = block_forward(make_token_set(in[0], in[1]), p, BlockKind::Dsa, opt, b);
        return add(sum(mul(out.z, out.z)), sum(mul(out.x, out.x)));
      },
      {rng.normal_tensor({4, 6}, 1.0), rng.normal_tensor({5, 6}, 1.0)});
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(BlockForward, StandardBlockParameterGradient) {
  const ModelDims dims{6, 2};
  RngStream rng(16);
  BlockParams p = BlockParams::init(dims, BlockKind::Standard, rng);
  const Tensor z = rng.normal_tensor({3, 6}, 1.0), x = rng.normal_tensor({4, 6}, 1.0);
  const auto r = check_gradients(
      "standard-block",
      [&](Tape& t, std::span<const Var> in) {
        const BlockParams& q = p;  // bound by pointer, so it must outlive the tape
        std::unordered_set<const Tensor*> none;
        ParamBinder b(t, &none);
        Var tt = concat(std::vector<Var>{t.constant(z), t.constant(x)}, 0);
        Var h = layer_norm(tt, b(q.norm1.gamma), b(q.norm1.beta));
        const HeadProjections hp = split_heads(linear(h, in[0], b(q.b_qkv)), 2);
        Var attn = linear(reshape(permute(self_attention(hp), {1, 0, 2}), {7, 6}), b(q.w_out), b(q.b_out));
        Var out = feed_forward_ref(add(tt, attn), q, b);
        return sum(mul(out, out));
      },
      {p.w_qkv});
  EXPECT_LT(r.max_rel_error, 1e-5);
}
