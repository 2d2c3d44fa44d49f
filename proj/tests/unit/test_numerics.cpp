#include <gtest/gtest.h>

#include <cmath>

#include "dsatrack/autograd.hpp"
#include "dsatrack/gradcheck.hpp"
#include "dsatrack/kernels.hpp"
#include "dsatrack/rng.hpp"
#include "dsatrack/weights_io.hpp"

using namespace dsa;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::int64_t p = 0; p < k; ++p) s += a.at({i, p}) * b.at({p, j});
      out.at({i, j}) = s;
    }
  return out;
}

}  // namespace

TEST(Matmul, IdentityAndScalar) {
  const Tensor id = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor b = Tensor::from({2, 2}, {3, 4, 5, 6});
  EXPECT_TRUE(matmul(id, b).bitwise_equal(b));
  EXPECT_DOUBLE_EQ(matmul(Tensor::from({1, 1}, {2}), Tensor::from({1, 1}, {3})).item(), 6.0);
}

TEST(Matmul, MatchesTripleLoop) {
  RngStream rng(7);
  const Tensor a = rng.normal_tensor({4, 5}, 1.0);
  const Tensor b = rng.normal_tensor({5, 3}, 1.0);
  EXPECT_LT(max_abs_diff(matmul(a, b), naive_matmul(a, b)), 1e-12);
  for (std::int64_t n : {1, 17, 33, 64}) {
    const Tensor x = rng.normal_tensor({n, n}, 1.0);
    const Tensor y = rng.normal_tensor({n, n}, 1.0);
    EXPECT_LT(max_abs_diff(matmul(x, y), naive_matmul(x, y)), 1e-12) << n;
  }
}

TEST(Matmul, BatchedAndBroadcast) {
  RngStream rng(3);
  const Tensor a = rng.normal_tensor({2, 3, 4}, 1.0);
  const Tensor b = rng.normal_tensor({4, 5}, 1.0);
  const Tensor out = matmul(a, b);
  ASSERT_EQ(out.shape(), (Shape{2, 3, 5}));
  for (std::int64_t s = 0; s < 2; ++s) {
    Tensor slice({3, 4});
    std::copy_n(a.ptr() + s * 12, 12, slice.ptr());
    const Tensor ref = naive_matmul(slice, b);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[s * 15 + i], ref[i], 1e-12);
  }
}

TEST(Matmul, ShapeErrors) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
  EXPECT_THROW(matmul(Tensor({2, 2, 3}), Tensor({3, 3, 2})), ShapeError);
  EXPECT_THROW(matmul(Tensor({3}), Tensor({3, 1})), ShapeError);
}

TEST(Softmax, ClosedForms) {
  const Tensor s0 = softmax(Tensor::from({2}, {0, 0}));
  EXPECT_DOUBLE_EQ(s0[0], 0.5);
  EXPECT_DOUBLE_EQ(s0[1], 0.5);
  const Tensor big = softmax(Tensor::from({2}, {1000, 1000}));
  EXPECT_DOUBLE_EQ(big[0], 0.5);
  EXPECT_DOUBLE_EQ(big[1], 0.5);
  const Tensor q = softmax(Tensor::from({2}, {std::log(1.0), std::log(3.0)}));
  EXPECT_NEAR(q[0], 0.25, 1e-15);
  EXPECT_NEAR(q[1], 0.75, 1e-15);
}

TEST(Softmax, SlicesNormalizeOnEveryAxis) {
  RngStream rng(11);
  const Tensor x = rng.normal_tensor({3, 4, 5}, 10.0);
  for (int axis = 0; axis < 3; ++axis) {
    const Tensor s = softmax(x, axis);
    const Tensor ls = log_softmax(x, axis);
    const Tensor sums = sum_axis(s, axis, false);
    Tensor exps = ls;
    for (double& v : exps.data()) v = std::exp(v);
    const Tensor esums = sum_axis(exps, axis, false);
    for (std::size_t i = 0; i < sums.size(); ++i) {
      EXPECT_NEAR(sums[i], 1.0, 1e-6);
      EXPECT_NEAR(esums[i], 1.0, 1e-6);
    }
    for (double v : s.data()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(Permute, RoundTrip) {
  RngStream rng(5);
  const Tensor x = rng.normal_tensor({2, 3, 4, 5}, 1.0);
  const std::vector<int> p{2, 0, 3, 1};
  const std::vector<int> inv{1, 3, 0, 2};
  const Tensor y = permute(x, p);
  EXPECT_EQ(y.shape(), (Shape{4, 2, 5, 3}));
  EXPECT_DOUBLE_EQ(y.at({3, 1, 4, 2}), x.at({1, 2, 3, 4}));
  EXPECT_TRUE(permute(y, inv).bitwise_equal(x));
}

TEST(Backward, Square) {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(3.0));
  tape.backward(mul(x, x));
  EXPECT_DOUBLE_EQ(tape.grad(x).item(), 6.0);
}

TEST(Backward, SoftmaxFirstComponent) {
  auto f = [](const Tensor& t) { return softmax(t)[0]; };
  const Tensor x = Tensor::from({2}, {0, 0});
  const Tensor numeric = finite_difference_gradient(f, x, 1e-5);
  Tape tape;
  Var v = tape.leaf(x);
  tape.backward(slice(softmax(v), 0, 0, 1));
  const Tensor g = tape.grad(v);
  EXPECT_NEAR(g[0], numeric[0], 1e-9);
  EXPECT_NEAR(g[1], numeric[1], 1e-9);
  EXPECT_NEAR(g[0], 0.25, 1e-12);
  EXPECT_NEAR(g[1], -0.25, 1e-12);
}

TEST(Backward, RejectsNonScalar) {
  Tape tape;
  Var x = tape.leaf(Tensor({2}, 1.0));
  EXPECT_THROW(tape.backward(scale(x, 2.0)), ShapeError);
}

TEST(Backward, VisitsEachNodeOnce) {
  Tape tape;
  Var x = tape.leaf(Tensor::from({3}, {1, 2, 3}));
  Var y = mul(x, x);
  Var z = add(y, x);
  Var w = sum(add(z, y));
  tape.backward(w);
  EXPECT_EQ(tape.last_backward_visits(), tape.size());
  const Tensor g = tape.grad(x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(g[i], 4.0 * (i + 1) + 1.0);
}

TEST(Backward, NonFiniteValuesRaise) {
  Tape tape;
  Var x = tape.leaf(Tensor::from({1}, {-1.0}));
  EXPECT_THROW(log(x), NumericalError);
}

TEST(FiniteDifference, TrivialFunctions) {
  const Tensor x = Tensor::from({3}, {0.3, -2.0, 5.0});
  const Tensor g = finite_difference_gradient(
      [](const Tensor& t) {
        double s = 0;
        for (double v : t.data()) s += v;
        return s;
      },
      x, 1e-5);
  for (double v : g.data()) EXPECT_NEAR(v, 1.0, 1e-9);
  const Tensor g2 = finite_difference_gradient([](const Tensor& t) { return t[0] * t[0]; }, Tensor::scalar(2.0), 1e-5);
  EXPECT_NEAR(g2.item(), 4.0, 1e-8);
  EXPECT_THROW(finite_difference_gradient([](const Tensor&) { return 0.0; }, x, 0.0), ValidationError);
  EXPECT_THROW(finite_difference_gradient([](const Tensor&) { return NAN; }, x, 1e-5), NumericalError);
}

class KernelGradients : public ::testing::Test {
 protected:
  RngStream rng{2024};
};

TEST_F(KernelGradients, MatmulSoftmaxChain) {
  const auto r = check_gradients(
      "matmul+softmax",
      [](Tape&, std::span<const Var> in) {
        Var s = softmax(matmul(in[0], in[1]), -1);
        return sum(mul(s, s));
      },
      {rng.normal_tensor({3, 4}, 1.0), rng.normal_tensor({4, 5}, 1.0)});
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST_F(KernelGradients, LinearLayerNormGelu) {
  const auto r = check_gradients(
      "ffn",
      [](Tape&, std::span<const Var> in) {
        Var h = layer_norm(in[0], in[1], in[2]);
        Var y = linear(gelu(linear(h, in[3], in[4])), in[5], in[6]);
        return sum(mul(y, y));
      },
      {rng.normal_tensor({4, 6}, 1.0), rng.normal_tensor({6}, 1.0), rng.normal_tensor({6}, 0.5),
       rng.normal_tensor({6, 8}, 0.5), rng.normal_tensor({8}, 0.1), rng.normal_tensor({8, 6}, 0.5),
       rng.normal_tensor({6}, 0.1)});
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST_F(KernelGradients, ShapeOps) {
  const auto r = check_gradients(
      "shape-ops",
      [](Tape&, std::span<const Var> in) {
        Var p = permute(in[0], {2, 0, 1});
        Var c = concat(std::vector<Var>{p, in[1]}, 1);
        Var s = index_select(c, 1, {4, 0, 0, 2});
        Var m = mean_axis(s, 2, true);
        Var ls = log_softmax(reshape(s, {8, 3}), -1);
        return add(sum(mul(m, m)), sum(mul(ls, sigmoid(reshape(s, {8, 3})))));
      },
      {rng.normal_tensor({2, 3, 2}, 1.0), rng.normal_tensor({2, 3, 3}, 1.0)});
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST_F(KernelGradients, ElementwiseOps) {
  Tensor b = rng.normal_tensor({5}, 1.0);
  for (double& v : b.data()) v = 1.5 + std::abs(v);
  const auto r = check_gradients(
      "elementwise",
      [](Tape&, std::span<const Var> in) {
        Var q = div(exp(in[0]), in[1]);
        Var m = maximum(minimum(in[0], in[1]), scale(in[1], -0.5));
        return sum(add(mul(log(in[1]), abs(q)), mul(m, relu(in[0]))));
      },
      {rng.normal_tensor({5}, 1.0), b});
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST_F(KernelGradients, Conv3x3AndFocal) {
  Tensor target({3, 4}, 0.0);
  for (std::int64_t y = 0; y < 3; ++y)
    for (std::int64_t x = 0; x < 4; ++x) target.at({y, x}) = std::exp(-((y - 1.0) * (y - 1.0) + (x - 2.0) * (x - 2.0)) / 2.0);
  const auto r = check_gradients(
      "conv+focal",
      [&target](Tape&, std::span<const Var> in) {
        Var h = conv3x3(in[0], in[1], in[2]);
        return focal_loss(reshape(h, {3, 4}), target);
      },
      {rng.normal_tensor({3, 4, 2}, 1.0), rng.normal_tensor({18, 1}, 0.5), rng.normal_tensor({1}, 0.1)});
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST_F(KernelGradients, ScaleRows) {
  const auto r = check_gradients(
      "scale_rows",
      [](Tape&, std::span<const Var> in) {
        Var m = reshape(slice(softmax(in[1], -1), 1, 0, 1), {3});
        Var y = scale_rows(in[0], m);
        return sum(mul(y, y));
      },
      {rng.normal_tensor({3, 4}, 1.0), rng.normal_tensor({3, 2}, 1.0)});
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(StraightThrough, ForwardHardBackwardIdentity) {
  Tape tape;
  Var soft = tape.leaf(Tensor::from({3}, {0.2, 0.7, 0.4}));
  Var st = straight_through(soft, Tensor::from({3}, {0, 1, 0}));
  EXPECT_DOUBLE_EQ(st.value()[1], 1.0);
  EXPECT_DOUBLE_EQ(st.value()[0], 0.0);
  tape.backward(sum(mul(st, tape.constant(Tensor::from({3}, {2, -3, 5})))));
  const Tensor g = tape.grad(soft);
  EXPECT_DOUBLE_EQ(g[0], 2.0);
  EXPECT_DOUBLE_EQ(g[1], -3.0);
  EXPECT_DOUBLE_EQ(g[2], 5.0);
}

// A deep composed graph on the order of 1e4 nodes.
TEST_F(KernelGradients, LargeComposedGraph) {
  const auto r = check_gradients(
      "deep-chain",
      [](Tape& tape, std::span<const Var> in) {
        Var h = in[0];
        for (int i = 0; i < 2000; ++i) {
          h = gelu(linear(h, in[1], in[2]));
          h = scale(add_scalar(h, 0.01), 0.9);
        }
        EXPECT_GT(tape.size(), 8000u);
        return sum(h);
      },
      {rng.normal_tensor({2, 3}, 1.0), rng.normal_tensor({3, 3}, 0.6), rng.normal_tensor({3}, 0.1)});
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(Rng, SameSeedSameStream) {
  RngStream a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 1000; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs = differs || x != c.next_u64();
  }
  EXPECT_TRUE(differs);
  RngStream u(1);
  for (int i = 0; i < 10000; ++i) {
    const double v = u.uniform();
    ASSERT_GT(v, 0.0);
    ASSERT_LT(v, 1.0);
  }
}

TEST(Weights, BitExactRoundTrip) {
  RngStream rng(9);
  std::vector<NamedTensor> ts{{"config", Tensor::from({3}, {192, 3, 12})},
                              {"blocks.0.w", rng.normal_tensor({4, 5}, 1.0)},
                              {"scalar", Tensor::scalar(0.5)}};
  const std::string bytes = encode_weights(ts);
  EXPECT_EQ(bytes.substr(0, 4), "DSAW");
  const auto decoded = decode_weights(bytes);
  ASSERT_EQ(decoded.size(), 3u);
  EXPECT_EQ(decoded[1].name, "blocks.0.w");
  EXPECT_EQ(decoded[1].value.shape(), (Shape{4, 5}));
  EXPECT_EQ(encode_weights(decoded), bytes);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(decoded[1].value[i], static_cast<double>(static_cast<float>(ts[1].value[i])));
  }
}

TEST(Weights, RejectsCorruptInput) {
  EXPECT_THROW(decode_weights("XXXX"), ValidationError);
  std::string bytes = encode_weights({{"a", Tensor({2}, 1.0)}});
  EXPECT_THROW(decode_weights(bytes.substr(0, bytes.size() - 1)), ValidationError);
  EXPECT_THROW(decode_weights(bytes + "x"), ValidationError);
}
