#include <gtest/gtest.h>

#include "focusnet/data.hpp"
#include "focusnet/optim.hpp"
#include "helpers.hpp"

using namespace focusnet;

namespace {

SynthSpec small_spec(std::uint64_t seed = 3) {
  SynthSpec s;
  s.count = 6;
  s.height = s.width = 32;
  s.min_radius = 3;
  s.max_radius = 9;
  s.val_fraction = 0.34;
  s.seed = seed;
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Synthetic data

TEST(Synthetic, SameSeedSameBytes) {
  test::TempDir dir;
  save_dataset(dir / "a", generate_synthetic(small_spec()));
  save_dataset(dir / "b", generate_synthetic(small_spec()));
  for (const char* f : {"images.fnt1", "masks.fnt1", "meta.json"})
    EXPECT_EQ(read_file(dir / "a" / f), read_file(dir / "b" / f)) << f;
  save_dataset(dir / "c", generate_synthetic(small_spec(4)));
  EXPECT_NE(read_file(dir / "a" / "images.fnt1"), read_file(dir / "c" / "images.fnt1"));
}

TEST(Synthetic, RangesShapesAndForegroundFraction) {
  const SynthSpec spec = small_spec();
  const Dataset ds = generate_synthetic(spec);
  EXPECT_EQ(ds.images.shape(), (Shape{6, 3, 32, 32}));
  EXPECT_EQ(ds.masks.shape(), (Shape{6, 1, 32, 32}));
  for (double v : ds.images.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));  // exactly storable
  }
  for (std::size_t n = 0; n < 6; ++n) {
    double fg = 0;
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) {
        const double m = ds.masks.at(n, 0, y, x);
        EXPECT_TRUE(m == 0.0 || m == 1.0);
        fg += m;
      }
    EXPECT_GE(fg / 1024, SynthSpec::kMinForeground);
    EXPECT_LE(fg / 1024, SynthSpec::kMaxForeground);
  }
}

TEST(Synthetic, ForegroundIsBrighterOnAverage) {
  const Dataset ds = generate_synthetic(small_spec());
  double in = 0, out = 0, n_in = 0, n_out = 0;
  for (std::size_t n = 0; n < 6; ++n)
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) {
        const double v = ds.images.at(n, 0, y, x);
        if (ds.masks.at(n, 0, y, x) > 0.5) {
          in += v;
          ++n_in;
        } else {
          out += v;
          ++n_out;
        }
      }
  EXPECT_GT(in / n_in, out / n_out + 0.2);
}

TEST(Synthetic, SplitIsDisjointAndComplete) {
  const Dataset ds = generate_synthetic(small_spec());
  EXPECT_EQ(ds.val_indices.size(), 2u);
  EXPECT_EQ(ds.train_indices.size(), 4u);
  std::vector<std::size_t> all = ds.train_indices;
  all.insert(all.end(), ds.val_indices.begin(), ds.val_indices.end());
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5}));
}

TEST(Synthetic, InvalidSpecsAreConfigErrors) {
  SynthSpec s = small_spec();
  s.val_fraction = 1.0;
  EXPECT_THROW(generate_synthetic(s), Error);
  s = small_spec();
  s.min_blobs = 3;
  s.max_blobs = 2;
  EXPECT_THROW(generate_synthetic(s), Error);
  s = small_spec();
  s.min_radius = s.max_radius = 40;  // every placement covers too much
  try {
    generate_synthetic(s);
    FAIL() << "impossible spec accepted";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::config);
  }
}

TEST(DatasetIo, RoundTripIsExact) {
  test::TempDir dir;
  const Dataset ds = generate_synthetic(small_spec());
  save_dataset(dir / "d", ds);
  const Dataset back = load_dataset(dir / "d");
  EXPECT_TRUE(test::bitwise_equal(back.images, ds.images));
  EXPECT_TRUE(test::bitwise_equal(back.masks, ds.masks));
  EXPECT_EQ(back.train_indices, ds.train_indices);
  EXPECT_EQ(back.val_indices, ds.val_indices);
}

TEST(DatasetIo, ErrorsCarryTheRightCategory) {
  test::TempDir dir;
  try {
    load_dataset(dir / "nope");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::io);
  }
  Dataset ds = generate_synthetic(small_spec());
  ds.masks[0] = 0.5;
  save_dataset(dir / "bad", ds);
  try {
    load_dataset(dir / "bad");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::format);
  }
}

TEST(DatasetBatch, StacksRowsInOrder) {
  const Dataset ds = generate_synthetic(small_spec());
  const std::vector<std::size_t> idx{4, 1};
  const auto [x, y] = ds.batch(idx);
  EXPECT_EQ(x.shape(), (Shape{2, 3, 32, 32}));
  EXPECT_EQ(x.at(0, 2, 5, 7), ds.images.at(4, 2, 5, 7));
  EXPECT_EQ(y.at(1, 0, 9, 3), ds.masks.at(1, 0, 9, 3));
  const std::vector<std::size_t> bad{6};
  EXPECT_THROW(ds.batch(bad), Error);
}

// ---------------------------------------------------------------------------
// Adam

namespace {

struct OneParam {
  ParamStore store;
  Var w;
  OneParam() { w = store.add("w", Tensor({3}, std::vector<double>{0.5, -1.0, 2.0})); }
  void set_grad(std::vector<double> g) {
    store.zero_grad();
    sum(mul(w, Var(Tensor({3}, std::move(g))))).backward();
  }
};

}  // namespace

TEST(Adam, MatchesReferenceRecurrence) {
  OneParam p;
  Adam adam(p.store, AdamOptions{0.01, 0.9, 0.999, 1e-8});
  std::vector<double> theta{0.5, -1.0, 2.0}, m(3, 0), v(3, 0);
  const std::vector<std::vector<double>> grads{{0.3, -2.0, 0.0}, {0.1, 1.0, 5.0}, {-0.4, 0.2, 1e-3}};
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    p.set_grad(grads[t - 1]);
    adam.step();
    for (std::size_t i = 0; i < 3; ++i) {
      const double g = grads[t - 1][i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      theta[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(p.w.value()[i], theta[i], 1e-15);
    }
  }
  EXPECT_EQ(adam.steps(), 3u);
}

TEST(Adam, FirstStepMovesByLrTimesSign) {
  OneParam p;
  Adam adam(p.store, AdamOptions{0.01});
  p.set_grad({3.0, -0.2, 1e3});
  adam.step();
  EXPECT_NEAR(p.w.value()[0], 0.49, 1e-9);
  EXPECT_NEAR(p.w.value()[1], -0.99, 1e-9);
  EXPECT_NEAR(p.w.value()[2], 1.99, 1e-9);
}

TEST(Adam, ZeroLearningRateAndZeroGradientLeaveParameters) {
  OneParam p;
  const Tensor before = p.w.value();
  Adam adam(p.store, AdamOptions{0.0});
  p.set_grad({1.0, 2.0, 3.0});
  adam.step();
  EXPECT_EQ(p.w.value(), before);

  Adam adam2(p.store, AdamOptions{0.1});
  p.set_grad({0.0, 0.0, 0.0});
  adam2.step();
  EXPECT_EQ(p.w.value(), before);
  EXPECT_EQ(adam2.steps(), 1u);
  for (const auto& t : adam2.state())
    if (t.name != "adam.t")
      for (double x : t.tensor.data()) EXPECT_EQ(x, 0.0);
}

TEST(Adam, StateRoundTripContinuesIdentically) {
  OneParam a, b;
  Adam adam_a(a.store, AdamOptions{0.05}), adam_b(b.store, AdamOptions{0.05});
  a.set_grad({1, 2, 3});
  adam_a.step();
  b.w.mutable_value() = a.w.value();
  adam_b.load_state(adam_a.state());
  a.set_grad({-1, 0.5, 2});
  b.set_grad({-1, 0.5, 2});
  adam_a.step();
  adam_b.step();
  EXPECT_TRUE(test::bitwise_equal(a.w.value(), b.w.value()));
}
