#include <gtest/gtest.h>

#include <cmath>

#include "dsatrack/correlation.hpp"
#include "dsatrack/gradcheck.hpp"
#include "dsatrack/rng.hpp"

using namespace dsa;

namespace {

// values[i, j, h] by explicit dot products
Tensor brute_correlation(const Tensor& q, const Tensor& k) {
  const auto nx = q.dim(0), dk = q.dim(1), l = q.dim(2), nz = k.dim(0);
  Tensor out({nx, nz, l});
  for (std::int64_t i = 0; i < nx; ++i)
    for (std::int64_t j = 0; j < nz; ++j)
      for (std::int64_t h = 0; h < l; ++h) {
        double s = 0.0;
        for (std::int64_t f = 0; f < dk; ++f) s += q.at({i, f, h}) * k.at({j, f, h});
        out.at({i, j, h}) = s / std::sqrt(static_cast<double>(dk));
      }
  return out;
}

}  // namespace

TEST(Correlation, SingleEntry) {
  Tape tape;
  Var q = tape.constant(Tensor::from({1, 4, 1}, {2, 0, 0, 0}));
  Var k = tape.constant(Tensor::from({1, 4, 1}, {1, 0, 0, 0}));
  const CorrelationMap c = correlation_map(q, k);
  EXPECT_DOUBLE_EQ(c.values.value().item(), 1.0);
  EXPECT_EQ(c.n_x, 1);
  EXPECT_EQ(c.n_z, 1);
  EXPECT_EQ(c.heads, 1);
  EXPECT_EQ(c.d_k, 4);
}

TEST(Correlation, OrthonormalGivesScaledIdentity) {
  const std::int64_t dk = 4, l = 2;
  Tensor e({dk, dk, l});
  for (std::int64_t i = 0; i < dk; ++i)
    for (std::int64_t h = 0; h < l; ++h) e.at({i, i, h}) = 1.0;
  Tape tape;
  const CorrelationMap c = correlation_map(tape.constant(e), tape.constant(e));
  for (std::int64_t i = 0; i < dk; ++i)
    for (std::int64_t j = 0; j < dk; ++j)
      for (std::int64_t h = 0; h < l; ++h) EXPECT_DOUBLE_EQ(c.values.value().at({i, j, h}), i == j ? 0.5 : 0.0);
}

TEST(Correlation, MatchesBruteForce) {
  RngStream rng(11);
  const Tensor q = rng.normal_tensor({6, 5, 2}, 1.0);
  const Tensor k = rng.normal_tensor({4, 5, 2}, 1.0);
  Tape tape;
  const CorrelationMap c = correlation_map(tape.constant(q), tape.constant(k));
  ASSERT_EQ(c.values.shape(), (Shape{6, 4, 2}));
  EXPECT_LT(max_abs_diff(c.values.value(), brute_correlation(q, k)), 1e-12);
}

TEST(Correlation, Bilinear) {
  RngStream rng(12);
  const Tensor q = rng.normal_tensor({5, 3, 2}, 1.0);
  const Tensor k = rng.normal_tensor({3, 3, 2}, 1.0);
  const double alpha = 1.7;
  Tape tape;
  const Tensor base = correlation_map(tape.constant(q), tape.constant(k)).values.value();
  Tensor qs = q, ks = k;
  for (auto& v : qs.data()) v *= alpha;
  for (auto& v : ks.data()) v *= alpha;
  const Tensor scaled = correlation_map(tape.constant(qs), tape.constant(ks)).values.value();
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(scaled[i], alpha * alpha * base[i], 1e-12);
}

TEST(Correlation, TemplatePermutationPermutesColumns) {
  RngStream rng(13);
  const Tensor q = rng.normal_tensor({4, 3, 2}, 1.0);
  const Tensor k = rng.normal_tensor({5, 3, 2}, 1.0);
  const std::vector<std::int64_t> perm = {3, 0, 4, 1, 2};
  Tensor kp({5, 3, 2});
  for (std::int64_t j = 0; j < 5; ++j)
    for (std::int64_t f = 0; f < 3; ++f)
      for (std::int64_t h = 0; h < 2; ++h) kp.at({j, f, h}) = k.at({perm[j], f, h});
  Tape tape;
  const Tensor c = correlation_map(tape.constant(q), tape.constant(k)).values.value();
  const Tensor cp = correlation_map(tape.constant(q), tape.constant(kp)).values.value();
  for (std::int64_t i = 0; i < 4; ++i)
    for (std::int64_t j = 0; j < 5; ++j)
      for (std::int64_t h = 0; h < 2; ++h) EXPECT_EQ(cp.at({i, j, h}), c.at({i, perm[j], h}));
}

TEST(Correlation, ShapeErrors) {
  Tape tape;
  EXPECT_THROW(correlation_map(tape.constant(Tensor({2, 4, 1})), tape.constant(Tensor({2, 3, 1}))), ShapeError);
  EXPECT_THROW(correlation_map(tape.constant(Tensor({2, 4, 2})), tape.constant(Tensor({2, 4, 1}))), ShapeError);
  EXPECT_THROW(correlation_map(tape.constant(Tensor({2, 4})), tape.constant(Tensor({2, 4}))), ShapeError);
}

TEST(Correlation, Gradient) {
  RngStream rng(14);
  const auto r = check_gradients(
      "correlation",
      [](Tape& t, std::span<const Var> in) {
        const CorrelationMap c = correlation_map(in[0], in[1]);
        return sum(mul(c.values, c.values));
      },
      {rng.normal_tensor({16, 4, 3}, 1.0), rng.normal_tensor({8, 4, 3}, 1.0)});
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(FlattenGrid, SmallGridRowMajor) {
  Tape tape;
  const CorrelationMap c = flatten_grid(tape.constant(Tensor::from({2, 2, 1, 1, 1}, {1, 2, 3, 4})));
  ASSERT_EQ(c.values.shape(), (Shape{4, 1, 1}));
  for (int i = 0; i < 4; ++i) EXPECT_EQ(c.values.value()[i], i + 1.0);
}

TEST(FlattenGrid, RoundTripBitwise) {
  RngStream rng(15);
  const Tensor g = rng.normal_tensor({3, 3, 2, 2, 2}, 1.0);
  Tape tape;
  const CorrelationMap c = flatten_grid(tape.constant(g));
  EXPECT_EQ(c.n_x, 9);
  EXPECT_EQ(c.n_z, 4);
  EXPECT_TRUE(unflatten_grid(c, 3, 3, 2, 2).value().bitwise_equal(g));
}

TEST(FlattenGrid, IndexArithmetic) {
  // a marker at search cell (row 1, col 0) of a 2x2 search grid
  Tensor g({2, 2, 1, 1, 1});
  g.at({1, 0, 0, 0, 0}) = 9.0;
  Tape tape;
  const CorrelationMap c = flatten_grid(tape.constant(g));
  const std::int64_t w_x = 2, row = 1 * w_x + 0;
  EXPECT_EQ(row, 2);
  EXPECT_EQ(c.values.value().at({row, 0, 0}), 9.0);
}

TEST(SelectTemplates, KeepsColumns) {
  RngStream rng(16);
  Tape tape;
  CorrelationMap c;
  c.values = tape.constant(rng.normal_tensor({3, 5, 2}, 1.0));
  c.n_x = 3, c.n_z = 5, c.heads = 2, c.d_k = 4;
  const CorrelationMap s = select_templates(c, {1, 4});
  EXPECT_EQ(s.n_z, 2);
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t h = 0; h < 2; ++h) {
      EXPECT_EQ(s.values.value().at({i, 0, h}), c.values.value().at({i, 1, h}));
      EXPECT_EQ(s.values.value().at({i, 1, h}), c.values.value().at({i, 4, h}));
    }
}
