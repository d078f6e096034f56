#include <cmath>

#include <gtest/gtest.h>

#include "focusnet/ops.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace focusnet;
using test::max_abs_diff;

namespace {

Tensor grid(Shape s, std::vector<double> v) { return Tensor(std::move(s), std::move(v)); }

struct ConvCase {
  std::size_t h, w, cin, cout, groups, k;
  bool bias;
};

// Every combination up to 8x8 spatial and 8 channels with groups 1, 2, 4 and
// kernels 1, 3, 5.
std::vector<ConvCase> conv_cases(std::size_t spatial_step = 1) {
  std::vector<ConvCase> out;
  for (std::size_t g : {1, 2, 4})
    for (std::size_t cin = g; cin <= 8; cin += g)
      for (std::size_t cout = g; cout <= 8; cout += g)
        for (std::size_t k : {1, 3, 5})
          for (std::size_t h = 1; h <= 8; h += spatial_step)
            for (std::size_t w = 1; w <= 8; w += spatial_step)
              out.push_back({h, w, cin, cout, g, k, (h + w + cin) % 2 == 0});
  return out;
}

}  // namespace

TEST(Conv2d, IdentityKernel) {
  Rng rng(1);
  const Var x(random_uniform({2, 3, 5, 4}, rng));
  Tensor w({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) w[c * 3 + c] = 1.0;
  const Var y = conv2d(x, ConvSpec{1, 1, 3, 3, 1, false}, Var(w));
  EXPECT_EQ(y.value(), x.value());
}

TEST(Conv2d, AllOnesKernelOnAllOnesInput) {
  const Var x(Tensor({1, 1, 3, 3}, 1.0));
  for (ConvAlgo algo : {ConvAlgo::gemm, ConvAlgo::direct}) {
    ForceConvAlgo force(algo);
    const Var y = conv2d(x, ConvSpec{3, 3, 1, 1, 1, false}, Var(Tensor({1, 1, 3, 3}, 1.0)));
    EXPECT_EQ(y.value(), grid({1, 1, 3, 3}, {4, 6, 4, 6, 9, 6, 4, 6, 4}));
  }
}

TEST(Conv2d, GroupsAreIndependent) {
  Rng rng(2);
  const ConvSpec spec{3, 3, 4, 4, 2, true};
  const Tensor w = random_uniform(spec.weight_shape(), rng), b = random_uniform({4}, rng);
  Tensor x = random_uniform({1, 4, 5, 5}, rng);
  const Tensor y0 = conv2d(Var(x), spec, Var(w), Var(b)).value();
  for (std::size_t i = 0; i < 25; ++i) x[2 * 25 + i] += 1.0;  // perturb input channel 2
  const Tensor y1 = conv2d(Var(x), spec, Var(w), Var(b)).value();
  for (std::size_t i = 0; i < 2 * 25; ++i) EXPECT_EQ(y0[i], y1[i]);
  bool changed = false;
  for (std::size_t i = 2 * 25; i < 4 * 25; ++i) changed = changed || y0[i] != y1[i];
  EXPECT_TRUE(changed);
}

TEST(Conv2d, GroupedEqualsIndependentSliceConvolutions) {
  Rng rng(3);
  const ConvSpec spec{3, 3, 4, 6, 2, false};
  const Var x(random_uniform({2, 4, 6, 6}, rng));
  const Tensor w = random_uniform(spec.weight_shape(), rng);
  const Tensor y = conv2d(x, spec, Var(w)).value();
  const ConvSpec half{3, 3, 2, 3, 1, false};
  for (std::size_t g = 0; g < 2; ++g) {
    const Var xs = slice_channels(x, 2 * g, 2);
    const Tensor ws({3, 2, 3, 3},
                    std::vector<double>(w.ptr() + g * 54, w.ptr() + (g + 1) * 54));
    const Tensor yg = conv2d(xs, half, Var(ws)).value();
    const Tensor ref = slice_channels(Var(y), 3 * g, 3).value();
    EXPECT_EQ(yg, ref);
  }
}

TEST(Conv2d, RejectsInvalidSpecs) {
  const Var x(Tensor({1, 4, 4, 4}));
  EXPECT_THROW(conv2d(x, ConvSpec{3, 3, 4, 6, 4, false}, Var(Tensor({6, 1, 3, 3}))), Error);
  EXPECT_THROW(conv2d(x, ConvSpec{2, 2, 4, 4, 1, false}, Var(Tensor({4, 4, 2, 2}))), Error);
  EXPECT_THROW(conv2d(x, ConvSpec{3, 3, 3, 4, 1, false}, Var(Tensor({4, 3, 3, 3}))), Error);
  EXPECT_THROW(conv2d(x, ConvSpec{3, 3, 4, 4, 1, false}, Var(Tensor({4, 4, 1, 1}))), Error);
}

TEST(Conv2d, ForwardMatchesDirectLoopOracleOnAllSmallShapes) {
  Rng rng(4);
  std::size_t n = 0;
  for (const ConvCase& c : conv_cases()) {
    const ConvSpec spec{c.k, c.k, c.cin, c.cout, c.groups, c.bias};
    const Tensor x = random_uniform({2, c.cin, c.h, c.w}, rng);
    const Tensor w = random_uniform(spec.weight_shape(), rng);
    std::optional<Tensor> b;
    if (c.bias) b = random_uniform({c.cout}, rng);
    const Tensor ref = oracle::conv2d(x, spec, w, b);
    for (ConvAlgo algo : {ConvAlgo::gemm, ConvAlgo::direct}) {
      ForceConvAlgo force(algo);
      std::optional<Var> bv;
      if (b) bv = Var(*b);
      const Tensor y = conv2d(Var(x), spec, Var(w), bv).value();
      ASSERT_LE(max_abs_diff(y, ref), 1e-12)
          << "h=" << c.h << " w=" << c.w << " cin=" << c.cin << " cout=" << c.cout
          << " groups=" << c.groups << " k=" << c.k << " algo=" << static_cast<int>(algo);
      ++n;
    }
  }
  EXPECT_GT(n, 30000u);
}

TEST(Conv2d, BackwardMatchesOracleAdjoint) {
  Rng rng(5);
  for (const ConvCase& c : conv_cases(3)) {
    const ConvSpec spec{c.k, c.k, c.cin, c.cout, c.groups, true};
    const Tensor x = random_uniform({2, c.cin, c.h, c.w}, rng);
    const Tensor w = random_uniform(spec.weight_shape(), rng);
    const Tensor b = random_uniform({c.cout}, rng);
    const Tensor gy = random_uniform({2, c.cout, c.h, c.w}, rng);
    const oracle::ConvGrads ref = oracle::conv2d_backward(x, spec, w, gy);
    for (ConvAlgo algo : {ConvAlgo::gemm, ConvAlgo::direct}) {
      ForceConvAlgo force(algo);
      Var xv(x, true), wv(w, true), bv(b, true);
      sum(mul(conv2d(xv, spec, wv, bv), Var(gy))).backward();
      ASSERT_LE(max_abs_diff(xv.grad(), ref.dx), 1e-12);
      ASSERT_LE(max_abs_diff(wv.grad(), ref.dw), 1e-12);
      ASSERT_LE(max_abs_diff(bv.grad(), ref.db), 1e-12);
    }
  }
}

TEST(Conv2d, LargePlanesUseBothPathsConsistently) {
  // Exercises the row-block tiling of the im2col path (H*W*K beyond one block).
  Rng rng(6);
  const ConvSpec spec{5, 5, 4, 4, 2, true};
  const Tensor x = random_uniform({1, 4, 64, 48}, rng);
  const Tensor w = random_uniform(spec.weight_shape(), rng), b = random_uniform({4}, rng);
  const Tensor ref = oracle::conv2d(x, spec, w, b);
  for (ConvAlgo algo : {ConvAlgo::gemm, ConvAlgo::direct, ConvAlgo::automatic}) {
    ForceConvAlgo force(algo);
    EXPECT_LE(max_abs_diff(conv2d(Var(x), spec, Var(w), Var(b)).value(), ref), 1e-12);
  }
}

// ---------------------------------------------------------------------------

TEST(Pooling, MaxPoolAndUpsampleExamples) {
  EXPECT_EQ(max_pool2(Var(grid({1, 1, 2, 2}, {1, 2, 3, 4}))).value(), grid({1, 1, 1, 1}, {4}));
  EXPECT_EQ(upsample_repeat2(Var(grid({1, 1, 2, 2}, {1, 2, 3, 4}))).value(),
            grid({1, 1, 4, 4}, {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));
  EXPECT_THROW(max_pool2(Var(Tensor({1, 1, 3, 4}))), Error);
}

TEST(Pooling, UpsampleOfPoolKeepsShape) {
  Rng rng(7);
  const Var x(random_uniform({2, 3, 6, 8}, rng));
  EXPECT_EQ(upsample_repeat2(max_pool2(x)).shape(), x.shape());
}

TEST(Pooling, GradientsRouteToArgmaxAndSumOverPatch) {
  Var x(grid({1, 1, 2, 2}, {1, 5, 3, 4}), true);
  sum(max_pool2(x)).backward();
  EXPECT_EQ(x.grad(), grid({1, 1, 2, 2}, {0, 1, 0, 0}));
  Var u(grid({1, 1, 1, 1}, {2}), true);
  sum(upsample_repeat2(u)).backward();
  EXPECT_EQ(u.grad()[0], 4.0);
}

TEST(Activations, Examples) {
  EXPECT_EQ(sigmoid(Var(Tensor({1}, 0.0))).value()[0], 0.5);
  EXPECT_DOUBLE_EQ(leaky_relu(Var(Tensor({1}, -1.0)), 0.3).value()[0], -0.3);
  EXPECT_EQ(relu(Var(grid({2}, {-2, 2}))).value(), grid({2}, {0, 2}));
}

TEST(Activations, SigmoidStaysInsideOpenInterval) {
  const Tensor s = sigmoid(Var(grid({4}, {-800, -30, 30, 800}))).value();
  for (double v : s.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(BatchNorm, ConstantChannelNormalizesToZero) {
  Tensor rm({2}), rv({2}, 1.0);
  const Var y = batch_norm(Var(Tensor({3, 2, 2, 2}, 4.0)), Var(Tensor({2}, 1.0)),
                           Var(Tensor({2})), rm, rv, Mode::train);
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, PlusMinusOneExample) {
  Tensor rm({1}), rv({1}, 1.0);
  const Var y = batch_norm(Var(grid({1, 1, 1, 2}, {-1, 1})), Var(Tensor({1}, 1.0)),
                           Var(Tensor({1})), rm, rv, Mode::train);
  const double e = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(y.value()[0], -e, 1e-15);
  EXPECT_NEAR(y.value()[1], e, 1e-15);
  // Running statistics: momentum 0.99, biased batch variance 1.
  EXPECT_NEAR(rm[0], 0.0, 1e-15);
  EXPECT_NEAR(rv[0], 1.0, 1e-15);
}

TEST(BatchNorm, RunningStatsFollowMovingAverage) {
  Tensor rm({1}), rv({1}, 1.0);
  batch_norm(Var(grid({1, 1, 1, 2}, {1, 3})), Var(Tensor({1}, 1.0)), Var(Tensor({1})), rm, rv,
             Mode::train);
  EXPECT_NEAR(rm[0], 0.01 * 2.0, 1e-15);
  EXPECT_NEAR(rv[0], 0.99 + 0.01 * 1.0, 1e-15);
}

TEST(BatchNorm, EvalWithUnitStatsIsIdentityUpToEps) {
  Rng rng(8);
  const Tensor x = random_uniform({2, 3, 2, 2}, rng);
  Tensor rm({3}), rv({3}, 1.0);
  const Var y = batch_norm(Var(x), Var(Tensor({3}, 1.0)), Var(Tensor({3})), rm, rv, Mode::eval);
  EXPECT_LE(max_abs_diff(y.value(), x), 1e-5);
  EXPECT_EQ(rm, Tensor({3}));
}

TEST(Reductions, GlobalAveragePool) {
  EXPECT_EQ(global_avg_pool(Var(grid({1, 1, 2, 2}, {1, 2, 3, 4}))).value(), grid({1, 1}, {2.5}));
  EXPECT_EQ(global_avg_pool(Var(Tensor({2, 8, 16, 16}, 0.75))).value(), Tensor({2, 8}, 0.75));
}

TEST(Dropout, IdentityCasesAndSeededMask) {
  Rng rng(9);
  const Var x(random_uniform({4, 5}, rng));
  EXPECT_EQ(dropout(x, 0.0, Mode::train, 1).value(), x.value());
  EXPECT_EQ(dropout(x, 0.5, Mode::eval, 1).value(), x.value());
  EXPECT_EQ(dropout(x, 0.5, Mode::train, 3).value(), dropout(x, 0.5, Mode::train, 3).value());
  EXPECT_THROW(dropout(x, 1.0, Mode::train, 1), Error);
}

TEST(Dropout, MonteCarloMeanIsPreserved) {
  const Var x(Tensor({100000}, 1.0));
  double mean_out = 0.0;
  const Var y = dropout(x, 0.5, Mode::train, 17);
  for (double v : y.value().data()) {
    EXPECT_TRUE(v == 0.0 || v == 2.0);
    mean_out += v;
  }
  mean_out /= 100000.0;
  EXPECT_NEAR(mean_out, 1.0, 0.02);
}

TEST(Elementwise, ExactSemantics) {
  Rng rng(10);
  const Var f(random_uniform({1, 4, 3, 3}, rng));
  EXPECT_EQ(add(f, Var(Tensor(f.shape()))).value(), f.value());
  EXPECT_EQ(mul(f, Var(Tensor(f.shape(), 1.0))).value(), f.value());
  EXPECT_THROW(add(f, Var(Tensor({1, 4, 3, 2}))), Error);
}

TEST(Channels, ConcatSliceAndPermute) {
  Rng rng(11);
  const Var a(random_uniform({1, 4, 8, 8}, rng)), b(random_uniform({1, 4, 8, 8}, rng));
  const Var c = concat_channels({a, b});
  EXPECT_EQ(c.shape(), (Shape{1, 8, 8, 8}));
  EXPECT_EQ(slice_channels(c, 0, 4).value(), a.value());
  EXPECT_EQ(slice_channels(c, 4, 4).value(), b.value());
  const Var p = permute_channels(c, {4, 5, 6, 7, 0, 1, 2, 3});
  EXPECT_EQ(slice_channels(p, 0, 4).value(), b.value());
  EXPECT_THROW(concat_channels({a, Var(Tensor({1, 4, 8, 4}))}), Error);
}

TEST(Dense, MatchesHandComputation) {
  const Var x(grid({1, 2}, {1, 2}));
  const Var w(grid({2, 3}, {1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(dense(x, w).value(), grid({1, 3}, {9, 12, 15}));
}

TEST(ScaleChannels, BroadcastsPerChannel) {
  const Var x(Tensor({1, 2, 2, 2}, 2.0));
  const Tensor y = scale_channels(x, Var(grid({1, 2}, {0.5, 3}))).value();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y[i], 1.0);
  for (std::size_t i = 4; i < 8; ++i) EXPECT_EQ(y[i], 6.0);
}
