// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "beamckm/adam.hpp"
#include "beamckm/nn.hpp"
#include "beamckm/ops.hpp"
#include "gradient_cases.hpp"
#include "oracles.hpp"

using namespace beamckm;
using T64 = Tensor<double>;
using oracle::random_tensor;

using gradcase::fixed_weights;
using gradcase::weighted_sum;

// ---------------------------------------------------------------- conv2d

TEST(Conv2d, IdentityKernelReturnsInput) {
  Rng rng(1);
  T64 x = random_tensor(rng, {1, 4, 5});
  T64 k({1, 1, 1, 1}, {1.0});
  T64 b = T64::zeros({1});
  T64 y = conv2d(x, k, b, 1, 0);
  EXPECT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], x[i]);
}

TEST(Conv2d, AllOnesGivesNine) {
  T64 x = T64::full({1, 3, 3}, 1.0);
  T64 k = T64::full({1, 1, 3, 3}, 1.0);
  T64 y = conv2d(x, k, T64::zeros({1}), 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.item(), 9.0);
}

TEST(Conv2d, MatchesNestedLoopsOnBatchOfTwo) {
  Rng rng(2);
  T64 k = random_tensor(rng, {4, 3, 3, 3});
  T64 b = random_tensor(rng, {4});
  for (int n = 0; n < 2; ++n) {
    T64 x = random_tensor(rng, {3, 5, 5});
    T64 y = conv2d(x, k, b, 1, 1);
    std::size_t ho, wo;
    auto ref = oracle::conv2d(x.vec(), 3, 5, 5, k.vec(), 4, 3, b.vec(), 1, 1, ho, wo);
    ASSERT_EQ(y.shape(), (Shape{4, ho, wo}));
    EXPECT_LT(oracle::max_abs_diff(ref, y.values()), 1e-12);
  }
}

TEST(Conv2d, ChannelMismatchIsDimensionError) {
  T64 x = T64::zeros({2, 4, 4});
  T64 k = T64::zeros({1, 3, 3, 3});
  EXPECT_THROW(conv2d(x, k, T64::zeros({1}), 1, 1), DimensionError);
}

TEST(Conv2d, EvenKernelRejected) {
  T64 x = T64::zeros({1, 4, 4});
  T64 k = T64::zeros({1, 1, 2, 2});
  EXPECT_THROW(conv2d(x, k, T64{}, 1, 0), DimensionError);
}

// ---------------------------------------------------------------- layer_norm

TEST(LayerNorm, ConstantRowMapsToZero) {
  T64 x({1, 4}, {5, 5, 5, 5});
  T64 y = layer_norm(x, T64::full({4}, 1.0), T64::zeros({4}), 1e-5);
  for (double v : y.vec()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(LayerNorm, TwoElementClosedForm) {
  const double eps = 1e-5;
  T64 y = layer_norm(T64({1, 2}, {1, -1}), T64::full({2}, 1.0), T64::zeros({2}), eps);
  const double expect = 1.0 / std::sqrt(1.0 + eps);
  EXPECT_NEAR(y[0], expect, 1e-15);
  EXPECT_NEAR(y[1], -expect, 1e-15);
  EXPECT_NEAR(y[0], 0.999995, 1e-6);
}

TEST(LayerNorm, ZeroGammaCollapsesToBeta) {
  Rng rng(3);
  T64 x = random_tensor(rng, {3, 6});
  T64 y = layer_norm(x, T64::zeros({6}), T64::full({6}, 2.5), 1e-5);
  for (double v : y.vec()) EXPECT_DOUBLE_EQ(v, 2.5);
}

TEST(LayerNorm, UnitGammaGivesZeroMeanUnitVariance) {
  Rng rng(4);
  T64 y = layer_norm(random_tensor(rng, {5, 16}, -3, 7), 1e-12);
  for (std::size_t r = 0; r < 5; ++r) {
    double mu = 0, var = 0;
    for (std::size_t j = 0; j < 16; ++j) mu += y[r * 16 + j] / 16;
    for (std::size_t j = 0; j < 16; ++j) var += (y[r * 16 + j] - mu) * (y[r * 16 + j] - mu) / 16;
    EXPECT_NEAR(mu, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-9);
  }
}

// ---------------------------------------------------------------- attention

TEST(Attention, SingleTokenIsValueThenOutputProjection) {
  Rng rng(5);
  const std::size_t d = 4;
  T64 x = random_tensor(rng, {1, d});
  T64 wq = random_tensor(rng, {d, d}), wk = random_tensor(rng, {d, d}), wv = random_tensor(rng, {d, d}),
      wo = random_tensor(rng, {d, d});
  std::vector<T64> weights;
  T64 y = multihead_attention(x, wq, wk, wv, wo, 2, &weights);
  for (auto& wgt : weights) EXPECT_DOUBLE_EQ(wgt.item(), 1.0);
  std::vector<double> v(d, 0.0), expect(d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) v[i] += wv[i * d + j] * x[j];
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) expect[i] += wo[i * d + j] * v[j];
  EXPECT_LT(oracle::max_abs_diff(expect, y.values()), 1e-14);
}

TEST(Attention, IdenticalRowsGiveUniformWeights) {
  Rng rng(6);
  const std::size_t l = 5, d = 8;
  T64 row = random_tensor(rng, {1, d}, -1, 1, false);
  std::vector<double> xv;
  for (std::size_t r = 0; r < l; ++r) xv.insert(xv.end(), row.vec().begin(), row.vec().end());
  T64 x({l, d}, xv);
  std::vector<T64> weights;
  T64 y = multihead_attention(x, random_tensor(rng, {d, d}), random_tensor(rng, {d, d}), random_tensor(rng, {d, d}),
                              random_tensor(rng, {d, d}), 4, &weights);
  for (auto& wgt : weights)
    for (double a : wgt.vec()) EXPECT_NEAR(a, 1.0 / l, 1e-15);
  for (std::size_t r = 1; r < l; ++r)
    for (std::size_t j = 0; j < d; ++j) EXPECT_DOUBLE_EQ(y[r * d + j], y[j]);
}

TEST(Attention, MatchesExplicitSoftmaxReference) {
  Rng rng(7);
  T64 x = random_tensor(rng, {3, 4});
  T64 wq = random_tensor(rng, {4, 4}), wk = random_tensor(rng, {4, 4}), wv = random_tensor(rng, {4, 4}),
      wo = random_tensor(rng, {4, 4});
  T64 y = multihead_attention(x, wq, wk, wv, wo, 2);
  auto ref = oracle::attention(x.vec(), 3, 4, wq.vec(), wk.vec(), wv.vec(), wo.vec(), 2);
  EXPECT_LT(oracle::max_abs_diff(ref, y.values()), 1e-12);
}

TEST(Attention, IndivisibleHeadsIsConfigError) {
  T64 x = T64::zeros({2, 6});
  T64 w = T64::zeros({6, 6});
  EXPECT_THROW(multihead_attention(x, w, w, w, w, 4), ConfigError);
}

// ---------------------------------------------------------------- activations

TEST(Activations, ValuesAtOrigin) {
  T64 z = T64::zeros({1});
  EXPECT_DOUBLE_EQ(silu(z).item(), 0.0);
  EXPECT_DOUBLE_EQ(sigmoid(z).item(), 0.5);
  EXPECT_DOUBLE_EQ(gelu(z).item(), 0.0);
}

TEST(Activations, SiluMatchesScalarFormula) {
  T64 x({4}, {-2, -1, 1, 2});
  T64 y = silu(x);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], x[i] * (1.0 / (1.0 + std::exp(-x[i]))), 1e-12);
}

TEST(Activations, GeluMatchesTanhApproximation) {
  T64 x({5}, {-3, -0.5, 0.25, 1, 4});
  T64 y = gelu(x);
  for (std::size_t i = 0; i < 5; ++i) {
    const double v = x[i];
    const double ref = 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v)));
    EXPECT_NEAR(y[i], ref, 1e-14);
  }
}

TEST(Activations, SigmoidIsMonotone) {
  std::vector<double> xs;
  for (int i = -50; i <= 50; ++i) xs.push_back(i * 0.7);
  T64 y = sigmoid(T64({xs.size()}, xs));
  for (std::size_t i = 1; i < xs.size(); ++i) EXPECT_LE(y[i - 1], y[i]);
}

// ---------------------------------------------------------------- backward

TEST(Backward, PowerRule) {
  T64 x = T64::scalar(3.0, true);
  backward(square(x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, SumSiluOfMatVecMatchesFiniteDifferences) {
  Rng rng(8);
  T64 w = random_tensor(rng, {4, 4});
  T64 x = random_tensor(rng, {4});
  auto loss = [&] { return sum(silu(linear(x, w))); };
  auto r = oracle::finite_difference_check(loss, {w, x}, rng, 100, 1e-5);
  EXPECT_LT(r.max_rel_err, 1e-6);
}

TEST(Backward, DisconnectedLeafHasZeroGrad) {
  T64 x = T64::scalar(2.0, true);
  T64 unused = T64::scalar(5.0, true);
  backward(square(x));
  EXPECT_EQ(unused.grad()[0], 0.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  T64 x = T64::zeros({3}, true);
  EXPECT_THROW(backward(square(x)), ContractError);
}

TEST(Backward, RepeatedCallsAccumulate) {
  T64 x = T64::scalar(3.0, true);
  T64 loss = square(x);
  backward(loss);
  backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Backward, DeterministicAfterReset) {
  Rng rng(9);
  T64 w = random_tensor(rng, {6, 6});
  T64 x = random_tensor(rng, {3, 6}, -1, 1, false);
  auto loss = [&] { return sum(gelu(multihead_attention(x, w, w, w, w, 3))); };
  backward(loss());
  std::vector<double> first(w.grad().begin(), w.grad().end());
  w.zero_grad();
  backward(loss());
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_EQ(first[i], w.grad()[i]);
}

TEST(Backward, SharedSubexpressionCountsTwice) {
  T64 x = T64::scalar(1.5, true);
  T64 y = square(x);
  backward(add(y, y));  // 2 x^2
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

// ---------------------------------------------------------------- adam

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  std::vector<T64> params{T64({3}, {1, -2, 3}, true)};
  AdamState<double> st(params, 1e-3);
  for (int i = 0; i < 5; ++i) {
    zero_grads(params);
    adam_step(params, st);
  }
  EXPECT_EQ(params[0].vec(), (std::vector<double>{1, -2, 3}));
  EXPECT_EQ(st.step_count, 5u);
}

TEST(Adam, FirstStepHandEvaluated) {
  std::vector<T64> params{T64::scalar(0.0, true)};
  AdamState<double> st(params, 1e-4);
  params[0].grad()[0] = 0.5;
  adam_step(params, st);
  // m = 0.05, v = 0.00025; mhat = 0.5, vhat = 0.25
  const double expect = -1e-4 * 0.5 / (0.5 + 1e-8);
  EXPECT_NEAR(params[0].item(), expect, 1e-20);
  EXPECT_NEAR(params[0].item(), -1e-4, 1e-11);
  EXPECT_DOUBLE_EQ(params[0].grad()[0], 0.5);  // untouched
}

TEST(Adam, ParametersUpdateIndependently) {
  auto run = [](std::vector<double> grads_a, std::vector<double> grads_b, bool joint) {
    std::vector<T64> pa{T64::scalar(1.0, true)}, pb{T64::scalar(-1.0, true)};
    std::vector<T64> both{pa[0], pb[0]};
    AdamState<double> sa(pa, 1e-2), sb(pb, 1e-2), sj(both, 1e-2);
    for (std::size_t i = 0; i < grads_a.size(); ++i) {
      pa[0].grad()[0] = grads_a[i];
      pb[0].grad()[0] = grads_b[i];
      if (joint) {
        adam_step(both, sj);
      } else {
        adam_step(pa, sa);
        adam_step(pb, sb);
      }
    }
    return std::pair{pa[0].item(), pb[0].item()};
  };
  auto sep = run({0.3, -0.1, 2.0}, {5.0, 1.0, -0.7}, false);
  auto joint = run({0.3, -0.1, 2.0}, {5.0, 1.0, -0.7}, true);
  EXPECT_EQ(sep, joint);
}

TEST(Adam, ZeroLearningRateIsIdentity) {
  Rng rng(10);
  std::vector<T64> params{random_tensor(rng, {7})};
  auto before = params[0].vec();
  AdamState<double> st(params, 0.0);
  for (auto& g : params[0].grad()) g = rng.normal();
  adam_step(params, st);
  EXPECT_EQ(params[0].vec(), before);
}

TEST(Adam, MissingGradientIsContractError) {
  std::vector<T64> params{T64::scalar(1.0, true)};
  AdamState<double> st(params, 1e-3);
  EXPECT_THROW(adam_step(params, st), ContractError);
}

// ---------------------------------------------------------------- gradient sweep

TEST(PrimitiveGradients, CentralDifferencesAgreeForEveryPrimitive) {
  Rng rng(11);
  for (const auto& c : gradcase::primitive_cases()) {
    std::function<T64()> loss;
    std::vector<T64> leaves;
    c.build(rng, loss, leaves);
    auto r = oracle::finite_difference_check(loss, leaves, rng, 100);
    EXPECT_GE(r.probes, 100) << c.name;
    EXPECT_LT(r.max_rel_err, 1e-5) << c.name;
  }
}

// ---------------------------------------------------------------- randomized references

TEST(NaiveReferences, ConvAttentionGroupNormOnFiftyInstances) {
  Rng rng(12);
  double worst_conv = 0, worst_attn = 0, worst_gn = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t cin = 1 + rng.below(3), cout = 1 + rng.below(4), ks = 1 + 2 * rng.below(2);
    const std::size_t h = ks + rng.below(5), w = ks + rng.below(5), stride = 1 + rng.below(2), pad = rng.below(2);
    T64 x = random_tensor(rng, {cin, h, w}), k = random_tensor(rng, {cout, cin, ks, ks}), b = random_tensor(rng, {cout});
    std::size_t ho, wo;
    auto ref = oracle::conv2d(x.vec(), cin, h, w, k.vec(), cout, ks, b.vec(), stride, pad, ho, wo);
    worst_conv = std::max(worst_conv, oracle::max_abs_diff(ref, conv2d(x, k, b, stride, pad).values()));

    const std::size_t heads = 1 + rng.below(3), dh = 1 + rng.below(3), l = 1 + rng.below(5), d = heads * dh;
    T64 xa = random_tensor(rng, {l, d});
    T64 wq = random_tensor(rng, {d, d}), wk = random_tensor(rng, {d, d}), wv = random_tensor(rng, {d, d}),
        wo2 = random_tensor(rng, {d, d});
    auto aref = oracle::attention(xa.vec(), l, d, wq.vec(), wk.vec(), wv.vec(), wo2.vec(), heads);
    worst_attn = std::max(worst_attn, oracle::max_abs_diff(aref, multihead_attention(xa, wq, wk, wv, wo2, heads).values()));

    const std::size_t groups = 1 + rng.below(3), c = groups * (1 + rng.below(3)), hw = 1 + rng.below(4);
    T64 xg = random_tensor(rng, {c, hw, 2}, -3, 3), g = random_tensor(rng, {c}), bb = random_tensor(rng, {c});
    auto gref = oracle::group_norm(xg.vec(), c, hw * 2, groups, g.vec(), bb.vec(), 1e-5);
    worst_gn = std::max(worst_gn, oracle::max_abs_diff(gref, group_norm(xg, groups, g, bb, 1e-5).values()));
  }
  EXPECT_LT(worst_conv, 1e-12);
  EXPECT_LT(worst_attn, 1e-12);
  EXPECT_LT(worst_gn, 1e-12);
}

TEST(GroupNormDefaults, FallbackGroupCounts) {
  EXPECT_EQ(default_groups(32), 8u);
  EXPECT_EQ(default_groups(4), 4u);
  EXPECT_EQ(default_groups(1), 1u);
  EXPECT_EQ(default_groups(20), 4u);
}
