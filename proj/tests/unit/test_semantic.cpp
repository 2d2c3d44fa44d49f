#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "dsatrack/gradcheck.hpp"
#include "dsatrack/kernels.hpp"
#include "dsatrack/relevance.hpp"
#include "dsatrack/semantic.hpp"

using namespace dsa;

namespace {

Tensor adjacency_of(const Tensor& e, DegreeMode mode = DegreeMode::SelfLoop) {
  Tape tape;
  return normalize_adjacency(tape.constant(e), mode).matrix.value();
}

CorrelationMap make_map(Tape& tape, const Tensor& v) {
  CorrelationMap c;
  c.values = tape.constant(v);
  c.n_x = v.dim(0), c.n_z = v.dim(1), c.heads = v.dim(2), c.d_k = 1;
  return c;
}

// Collatz-Wielandt bracket from power iteration; the matrix is nonnegative.
std::pair<double, double> perron_bracket(const Tensor& a) {
  const std::int64_t n = a.dim(0);
  std::vector<double> x(static_cast<std::size_t>(n), 1.0), y(x.size());
  double lo = 0.0, hi = 0.0;
  for (int it = 0; it < 20000; ++it) {
    for (std::int64_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::int64_t j = 0; j < n; ++j) s += a[i * n + j] * x[j];
      y[i] = s;
    }
    lo = 1e300, hi = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      lo = std::min(lo, y[i] / x[i]);
      hi = std::max(hi, y[i] / x[i]);
    }
    const double norm = *std::max_element(y.begin(), y.end());
    for (std::int64_t i = 0; i < n; ++i) x[i] = y[i] / norm;
    if (hi - lo < 1e-9) break;
  }
  return {lo, hi};
}

}  // namespace

TEST(NormalizeAdjacency, EmptyGraphIsIdentity) {
  const Tensor a = adjacency_of(Tensor({2, 2}));
  EXPECT_TRUE(a.bitwise_equal(Tensor::identity(2)));
}

TEST(NormalizeAdjacency, SwapGraph) {
  const Tensor a = adjacency_of(Tensor::from({2, 2}, {0, 1, 1, 0}));
  for (double v : a.data()) EXPECT_NEAR(v, 0.5, 1e-15);
}

TEST(NormalizeAdjacency, CompleteGraph) {
  for (std::int64_t n : {1, 3, 7, 16}) {
    // complete with or without explicit self-edges; Ê = ones either way once the diagonal is 0
    Tensor e({n, n}, 1.0);
    for (std::int64_t i = 0; i < n; ++i) e[i * n + i] = 0.0;
    const Tensor a = adjacency_of(e);
    for (double v : a.data()) EXPECT_NEAR(v, 1.0 / n, 1e-15) << n;
  }
}

TEST(NormalizeAdjacency, SymmetricInSymmetricOut) {
  RngStream rng(3);
  const std::int64_t n = 9;
  Tensor e({n, n});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = i; j < n; ++j) e[i * n + j] = e[j * n + i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
  const Tensor a = adjacency_of(e);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j) EXPECT_EQ(a[i * n + j], a[j * n + i]);
}

TEST(NormalizeAdjacency, UnitSpectralRadiusOnSampledGraphs) {
  RngStream rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::int64_t n = rng.uniform_int(1, 32);
    Tape tape;
    const Var pi = log_softmax(tape.constant(rng.normal_tensor({n, n, 2}, 1.5)), -1);
    const RelevanceGraph g = gumbel_relevance(pi, 1.0, GumbelMode::HardStraightThrough, rng);
    const auto [lo, hi] = perron_bracket(normalize_adjacency(g.edges).matrix.value());
    EXPECT_NEAR(lo, 1.0, 1e-6) << trial;
    EXPECT_NEAR(hi, 1.0, 1e-6) << trial;
  }
}

TEST(NormalizeAdjacency, LiteralDegreesRejectIsolatedNode) {
  Tape tape;
  EXPECT_THROW(normalize_adjacency(tape.constant(Tensor::from({2, 2}, {1, 0, 0, 0})), DegreeMode::Literal),
               NumericalError);
  // with every degree positive the literal form uses row sums of E
  const Tensor a = adjacency_of(Tensor::from({2, 2}, {0, 1, 1, 0}), DegreeMode::Literal);
  EXPECT_NEAR(a[0], 1.0, 1e-15);
  EXPECT_NEAR(a[1], 1.0, 1e-15);
}

TEST(NormalizeAdjacency, RejectsNonSquare) {
  Tape tape;
  EXPECT_THROW(normalize_adjacency(tape.constant(Tensor({2, 3}))), ShapeError);
}

TEST(SemanticCorrelation, IdentityPassThrough) {
  RngStream rng(5);
  const Tensor c = rng.normal_tensor({5, 4, 3}, 1.0);
  Tape tape;
  const NormalizedAdjacency adj = normalize_adjacency(tape.constant(Tensor({4, 4})));
  const CorrelationMap out = semantic_correlation(adj, make_map(tape, c), tape.constant(Tensor::identity(3)));
  EXPECT_TRUE(out.values.value().bitwise_equal(c));
}

TEST(SemanticCorrelation, CompleteGraphAveragesColumns) {
  RngStream rng(6);
  const Tensor c = rng.normal_tensor({3, 5, 2}, 1.0);
  Tape tape;
  Tensor e({5, 5}, 1.0);
  for (std::int64_t i = 0; i < 5; ++i) e[i * 5 + i] = 0.0;
  const NormalizedAdjacency adj = normalize_adjacency(tape.constant(e));
  const Tensor out = semantic_correlation(adj, make_map(tape, c), tape.constant(Tensor::identity(2))).values.value();
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t h = 0; h < 2; ++h) {
      double mean = 0.0;
      for (std::int64_t k = 0; k < 5; ++k) mean += c.at({i, k, h}) / 5.0;
      for (std::int64_t j = 0; j < 5; ++j) EXPECT_NEAR(out.at({i, j, h}), mean, 1e-12);
    }
}

TEST(SemanticCorrelation, MatchesExplicitProducts) {
  RngStream rng(7);
  const std::int64_t nx = 4, nz = 3, l = 2;
  const Tensor c = rng.normal_tensor({nx, nz, l}, 1.0);
  const Tensor a = rng.normal_tensor({nz, nz}, 1.0);
  const Tensor w = rng.normal_tensor({l, l}, 1.0);
  Tape tape;
  const Tensor out = semantic_correlation({tape.constant(a)}, make_map(tape, c), tape.constant(w)).values.value();
  for (std::int64_t i = 0; i < nx; ++i)
    for (std::int64_t j = 0; j < nz; ++j)
      for (std::int64_t hp = 0; hp < l; ++hp) {
        double s = 0.0;
        for (std::int64_t h = 0; h < l; ++h)
          for (std::int64_t k = 0; k < nz; ++k) s += c.at({i, k, h}) * a.at({j, k}) * w.at({h, hp});
        EXPECT_NEAR(out.at({i, j, hp}), s, 1e-12);
      }
}

TEST(SemanticCorrelation, MaxNormBound) {
  RngStream rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::int64_t nz = rng.uniform_int(2, 9), l = 3;
    Tensor c = rng.normal_tensor({6, nz, l}, 1.0);
    for (auto& v : c.data()) v = std::abs(v);
    Tensor e({nz, nz});
    for (auto& v : e.data()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
    Tape tape;
    const Tensor w = HeadMixer::init(l, rng).weight;
    const Tensor out =
        semantic_correlation(normalize_adjacency(tape.constant(e)), make_map(tape, c), tape.constant(w)).values.value();
    EXPECT_LE(max_abs(out), max_abs(c) * max_abs(w) * l + 1e-12);
  }
}

TEST(SemanticCorrelation, ShapeErrors) {
  Tape tape;
  const Tensor c({2, 3, 2});
  EXPECT_THROW(semantic_correlation({tape.constant(Tensor({4, 4}))}, make_map(tape, c), tape.constant(Tensor::identity(2))),
               ShapeError);
  EXPECT_THROW(semantic_correlation({tape.constant(Tensor({3, 3}))}, make_map(tape, c), tape.constant(Tensor::identity(3))),
               ShapeError);
}

TEST(SemanticCorrelation, GradientThroughNormalization) {
  RngStream rng(9);
  const std::int64_t nx = 6, nz = 5, l = 3;
  // soft edges in (0,1) so normalize_adjacency is differentiated away from the binary corners
  Tensor e({nz, nz});
  for (auto& v : e.data()) v = rng.uniform();
  const auto r = check_gradients(
      "semantic",
      [&](Tape& t, std::span<const Var> in) {
        const CorrelationMap c{in[1], nx, nz, l, 4};
        const CorrelationMap out = semantic_correlation(normalize_adjacency(in[0]), c, in[2]);
        return sum(mul(out.values, out.values));
      },
      {e, rng.normal_tensor({nx, nz, l}, 1.0), HeadMixer::init(l, rng).weight});
  EXPECT_LT(r.max_rel_error, 1e-5);

  const Tensor probe = rng.normal_tensor({nz, nz}, 1.0);
  const auto literal = check_gradients(
      "semantic-literal",
      [&](Tape& t, std::span<const Var> in) {
        return sum(mul(normalize_adjacency(in[0], DegreeMode::Literal).matrix, t.constant(probe)));
      },
      {e});
  EXPECT_LT(literal.max_rel_error, 1e-5);
}

TEST(HeadMixer, NearIdentity) {
  RngStream rng(10);
  const Tensor w = HeadMixer::init(3, rng).weight;
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t j = 0; j < 3; ++j) EXPECT_NEAR(w.at({i, j}), i == j ? 1.0 : 0.0, 0.15);
}
