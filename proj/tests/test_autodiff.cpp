#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "cfkd/autodiff.hpp"
#include "cfkd/errors.hpp"

using cfkd::Tensor;
using cfkd::ad::NodeId;
using cfkd::ad::Tape;

namespace {

// Builds a scalar loss from a differentiable leaf holding `x`.
using Graph = std::function<NodeId(Tape&, NodeId)>;

Tensor random_tensor(std::vector<std::size_t> shape, unsigned seed, double keep_away_from_zero = 0.0) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  for (auto& v : t.values()) {
    v = d(rng);
    if (std::abs(v) < keep_away_from_zero) v += v < 0 ? -keep_away_from_zero : keep_away_from_zero;
  }
  return t;
}

double eval(const Graph& g, const Tensor& x) {
  Tape tape;
  const NodeId leaf = tape.constant(x);
  return tape.value(g(tape, leaf))[0];
}

// Relative error between the tape gradient and central differences.
double gradient_error(const Graph& g, const Tensor& x) {
  Tape tape;
  const NodeId leaf = tape.variable(x);
  tape.backward(g(tape, leaf));
  const Tensor analytic = tape.grad(leaf);
  double diff = 0, scale = 0;
  const double h = 1e-6;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor p = x, m = x;
    p[i] += h;
    m[i] -= h;
    const double numeric = (eval(g, p) - eval(g, m)) / (2 * h);
    diff += (analytic[i] - numeric) * (analytic[i] - numeric);
    scale += numeric * numeric + analytic[i] * analytic[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(scale), 1e-12);
}

constexpr double kTol = 1e-4;

}  // namespace

TEST(AutodiffGradcheck, LinearThroughInputWeightsAndBias) {
  const Tensor w = random_tensor({5, 3}, 2), b = random_tensor({3}, 3), x = random_tensor({4, 5}, 1);
  const std::vector<int> labels{0, 2, 1, 1};
  auto wrt_input = [&](Tape& t, NodeId in) {
    return t.softmax_cross_entropy(t.linear(in, t.constant(w), t.constant(b)), labels);
  };
  EXPECT_LT(gradient_error(wrt_input, x), kTol);
  auto wrt_weights = [&](Tape& t, NodeId wn) {
    return t.softmax_cross_entropy(t.linear(t.constant(x), wn, t.constant(b)), labels);
  };
  EXPECT_LT(gradient_error(wrt_weights, w), kTol);
  auto wrt_bias = [&](Tape& t, NodeId bn) {
    return t.softmax_cross_entropy(t.linear(t.constant(x), t.constant(w), bn), labels);
  };
  EXPECT_LT(gradient_error(wrt_bias, b), kTol);
}

TEST(AutodiffGradcheck, TwoLayerMlpWithRelu) {
  const Tensor w1 = random_tensor({6, 8}, 11), b1 = random_tensor({8}, 12);
  const Tensor w2 = random_tensor({8, 2}, 13), b2 = random_tensor({2}, 14);
  const std::vector<int> labels{1, 0, 1};
  const std::vector<double> weights{0.2, 1.0, 3.0};
  auto g = [&](Tape& t, NodeId in) {
    const NodeId h = t.relu(t.linear(in, t.constant(w1), t.constant(b1)));
    return t.softmax_cross_entropy(t.linear(h, t.constant(w2), t.constant(b2)), labels, weights);
  };
  EXPECT_LT(gradient_error(g, random_tensor({3, 6}, 15)), kTol);
}

TEST(AutodiffGradcheck, NormsDotAddScale) {
  const Tensor other = random_tensor({7}, 21);
  auto g = [&](Tape& t, NodeId x) {
    const NodeId shifted = t.add(x, t.scale(t.constant(other), -0.5));
    return t.add(t.add(t.l1_norm(shifted), t.scale(t.squared_l2_norm(x), 0.3)), t.dot(x, t.constant(other)));
  };
  // Keep entries away from the kink of |.| so central differences are valid.
  Tensor x = random_tensor({7}, 22);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::abs(x[i] - 0.5 * other[i]) < 0.1) x[i] += 0.3;
  }
  EXPECT_LT(gradient_error(g, x), kTol);
}

TEST(AutodiffGradcheck, HeadGradientPenaltyWrtLogitsAndHead) {
  const Tensor head = random_tensor({4, 2}, 31), feats = random_tensor({5, 4}, 32), bias = random_tensor({2}, 33);
  const std::vector<double> v{0.5, -0.5, 0.5, 0.5};
  const std::vector<int> labels{0, 1, 1, 0, 1};
  auto wrt_features = [&](Tape& t, NodeId h) {
    const NodeId w = t.constant(head);
    return t.head_gradient_penalty(t.linear(h, w, t.constant(bias)), w, v, labels);
  };
  EXPECT_LT(gradient_error(wrt_features, feats), kTol);
  auto wrt_head = [&](Tape& t, NodeId w) {
    return t.head_gradient_penalty(t.linear(t.constant(feats), w, t.constant(bias)), w, v, labels);
  };
  EXPECT_LT(gradient_error(wrt_head, head), kTol);
}

TEST(Autodiff, CrossEntropyKnownValue) {
  Tape t;
  const NodeId logits = t.constant(Tensor::matrix({{0.0, 0.0}}));
  const std::vector<int> labels{1};
  EXPECT_NEAR(t.value(t.softmax_cross_entropy(logits, labels))[0], std::log(2.0), 1e-15);
}

TEST(Autodiff, ReluSubgradientAtZeroIsZero) {
  Tape t;
  const NodeId x = t.variable(Tensor::vector({0.0, 1.0, -1.0}));
  t.backward(t.l1_norm(t.relu(x)));
  EXPECT_EQ(t.grad(x)[0], 0.0);
  EXPECT_EQ(t.grad(x)[1], 1.0);
  EXPECT_EQ(t.grad(x)[2], 0.0);
}

TEST(Autodiff, GradientsAccumulateOverSharedNodes) {
  Tape t;
  const NodeId x = t.variable(Tensor::vector({2.0}));
  t.backward(t.add(t.squared_l2_norm(x), t.squared_l2_norm(x)));
  EXPECT_DOUBLE_EQ(t.grad(x)[0], 8.0);
}

TEST(Autodiff, BorrowedParametersAreNotCopied) {
  const Tensor w = Tensor::matrix({{1.0}});
  Tape t;
  const NodeId wn = t.borrow(w, true);
  EXPECT_EQ(&t.value(wn), &w);
}

TEST(Autodiff, ShapeMismatchThrows) {
  Tape t;
  const NodeId a = t.constant(Tensor::vector({1, 2}));
  const NodeId b = t.constant(Tensor::vector({1, 2, 3}));
  EXPECT_THROW(t.add(a, b), cfkd::ShapeError);
  EXPECT_THROW(t.backward(a), cfkd::Error);
}
