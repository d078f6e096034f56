#include <set>

#include <gtest/gtest.h>

#include "focusnet/gradcheck_suite.hpp"

using namespace focusnet;

namespace {

// x^3 with a deliberately wrong backward (2x^2 instead of 3x^2).
Var bad_cube(const Var& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::pow(x.value()[i], 3);
  return record(std::move(out), {x}, "bad_cube", [](Node& self) {
    if (Tensor* d = input_grad(self, 0))
      for (std::size_t i = 0; i < d->size(); ++i)
        (*d)[i] += self.grad[i] * 2.0 * std::pow(self.inputs[0]->value[i], 2);
  });
}

}  // namespace

TEST(GradCheck, AcceptsCorrectGradients) {
  Rng rng(1);
  Var x(random_uniform({3, 4}, rng), true);
  const auto rep = grad_check([&] { return sum(mul(sigmoid(x), x)); }, {{"x", x}});
  EXPECT_TRUE(rep.passed);
  EXPECT_EQ(rep.checked, 12u);
  EXPECT_LT(rep.max_rel_error, 1e-8);
}

TEST(GradCheck, SigmoidAtZero) {
  Var x(Tensor({1}, 0.0), true);
  const auto rep = grad_check([&] { return sum(sigmoid(x)); }, {{"x", x}});
  EXPECT_TRUE(rep.passed);
  Var y(Tensor({1}, 0.0), true);
  sum(sigmoid(y)).backward();
  EXPECT_EQ(y.grad()[0], 0.25);
}

TEST(GradCheck, RejectsAWrongBackward) {
  Var x(Tensor({2}, std::vector<double>{0.7, -1.3}), true);
  const auto rep = grad_check([&] { return sum(bad_cube(x)); }, {{"x", x}});
  EXPECT_FALSE(rep.passed);
  EXPECT_GT(rep.max_rel_error, 0.3);
  EXPECT_EQ(rep.nonsmooth, 0u);
}

TEST(GradCheck, FlagsStencilsStraddlingAKink) {
  // relu at exactly 0: the central difference is 1/2, the tape says 0. The
  // element is classified as non-smooth rather than as a gradient error.
  Var x(Tensor({1}, 0.0), true);
  const auto rep = grad_check([&] { return sum(relu(x)); }, {{"x", x}});
  EXPECT_EQ(rep.nonsmooth, 1u);
  EXPECT_EQ(rep.max_rel_error, 0.0);
}

TEST(GradCheck, LeavesAreRestoredAfterChecking) {
  Rng rng(2);
  const Tensor v = random_uniform({2, 2}, rng);
  Var x(v, true);
  grad_check([&] { return sum(mul(x, x)); }, {{"x", x}});
  EXPECT_EQ(x.value(), v);
}

TEST(GradCheck, RejectsNonScalarFunctions) {
  Var x(Tensor({2}, 1.0), true);
  EXPECT_THROW(grad_check([&] { return scale(x, 2.0); }, {{"x", x}}), Error);
}

TEST(GradCheck, ResidualSubblockHasIdentityPathWithZeroWeights) {
  ParamStore store;
  Rng rng(3);
  Builder b{store, rng};
  const auto r = ResidualSubblock::make(b, "r", 2, BlockOptions{});
  for (const auto& e : store.entries())
    if (e.name.ends_with("weight") || e.name.ends_with("bias")) {
      Var v = e.var;
      v.mutable_value().fill(0.0);
    }
  Var x(random_uniform({1, 2, 3, 3}, rng), true);
  const Context ctx{Mode::train, 0};
  const auto rep = grad_check([&] { return sum(r(x, ctx)); }, {{"x", x}});
  EXPECT_TRUE(rep.passed);
  Var y(x.value(), true);
  sum(r(y, ctx)).backward();
  for (double g : y.grad().data()) EXPECT_EQ(g, 1.0);
}

// Each case of the suite on a handful of seeds; the acceptance binary runs
// the full 100-instance sweep.
class SuiteCase : public ::testing::TestWithParam<std::string> {};

TEST_P(SuiteCase, PassesOnTenInstances) {
  for (const GradCase& c : gradcheck_cases()) {
    if (c.name != GetParam()) continue;
    const GradCaseResult r = run_grad_case(c, 10, 99, GradCheckOptions{});
    EXPECT_TRUE(r.passed) << r.name << " max_rel " << r.max_rel_error << " kinks "
                          << r.nonsmooth << "/" << r.checked;
    EXPECT_LT(r.max_rel_error, 1e-6);
    return;
  }
  FAIL() << "no case " << GetParam();
}

INSTANTIATE_TEST_SUITE_P(All, SuiteCase, ::testing::ValuesIn([] {
                           std::vector<std::string> names;
                           for (const auto& c : gradcheck_cases()) names.push_back(c.name);
                           return names;
                         }()),
                         [](const auto& info) { return info.param; });

TEST(GradCheckSuite, CoversEveryPrimitiveAndBlock) {
  std::set<std::string> names;
  for (const auto& c : gradcheck_cases()) names.insert(c.name);
  for (const char* n :
       {"conv2d", "max_pool2", "upsample_repeat2", "relu", "leaky_relu", "sigmoid",
        "batch_norm_train", "batch_norm_eval", "global_avg_pool", "dropout", "concat_channels",
        "channel_shuffle", "bace", "tversky_loss", "hybrid_loss", "all_wrap",
        "segmentation_loss", "squeeze_excite", "focusnet_attention", "attention_subblock",
        "residual_subblock", "group_attention_block", "variant_block_resnext_se"})
    EXPECT_TRUE(names.contains(n)) << n;
}
