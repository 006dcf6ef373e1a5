#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "smi/tensor/optim.hpp"
#include "smi/trainer.hpp"

using namespace smi;

namespace {

VitConfig small_config(int classes) {
  VitConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = 16;
  c.num_heads = 2;
  c.num_layers = 1;
  c.ffn_hidden = 32;
  c.num_classes = classes;
  return c;
}

// Two classes: bright left half or bright right half, plus noise.
Dataset halves(int n, Rng& rng) {
  Dataset d;
  d.num_classes = 2;
  std::normal_distribution<double> noise(0.0, 0.1);
  for (int i = 0; i < n; ++i) {
    Tensor t({8, 8, 1});
    const int label = i % 2;
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 8; ++c) t[r * 8 + c] = ((c < 4) == (label == 0) ? 1.0 : -1.0) + noise(rng);
    d.images.push_back(t);
    d.labels.push_back(label);
  }
  return d;
}

}  // namespace

TEST(Synthetic, DeterministicAndInRange) {
  SyntheticConfig sc;
  sc.count = 50;
  Rng a(5), b(5);
  const Dataset x = make_synthetic(sc, a), y = make_synthetic(sc, b);
  ASSERT_EQ(x.size(), 50u);
  EXPECT_EQ(x.labels, y.labels);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_TRUE(bit_equal(x.images[i], y.images[i]));
    EXPECT_EQ(x.images[i].shape(), (Shape{28, 28, 1}));
    EXPECT_GE(x.labels[i], 0);
    EXPECT_LT(x.labels[i], 10);
    for (double v : x.images[i].values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Synthetic, ForegroundMaskCoversGlyph) {
  SyntheticConfig sc;
  Rng rng(6);
  for (int label = 0; label < 10; ++label) {
    const auto s = make_synthetic_sample(sc, label, rng);
    EXPECT_EQ(s.label, label);
    const auto fg = std::accumulate(s.foreground.begin(), s.foreground.end(), 0);
    EXPECT_GT(fg, 10);
    EXPECT_LT(fg, 28 * 28 / 2);
  }
}

TEST(Synthetic, FullSpuriousCorrelationTiesTexture) {
  SyntheticConfig sc;
  sc.spurious_rho = 1.0;
  Rng rng(7);
  for (int i = 0; i < 30; ++i) {
    const auto s = make_synthetic_sample(sc, i % 10, rng);
    EXPECT_EQ(s.texture, s.label);
  }
}

TEST(Synthetic, NormalizationMapsToUnitRange) {
  Dataset d;
  d.num_classes = 1;
  Tensor t({1, 2, 1});
  t[0] = 0.0;
  t[1] = 1.0;
  d.images.push_back(t);
  d.labels.push_back(0);
  normalize_in_place(d, synthetic_normalization());
  EXPECT_EQ(d.images[0][0], -1.0);
  EXPECT_EQ(d.images[0][1], 1.0);
  EXPECT_EQ(synthetic_normalization().to_display(-1.0), 0.0);
}

TEST(Trainer, SeparableTwoClassReachesNearPerfect) {
  Rng rng(1);
  const Dataset d = halves(200, rng);
  TrainConfig tc;
  tc.epochs = 10;
  tc.batch_size = 16;
  tc.seed = 2;
  const auto res = train_teacher(d, small_config(2), tc);
  EXPECT_GE(res.accuracy.back(), 0.99);
  EXPECT_EQ(res.accuracy.size(), 11u);
  EXPECT_EQ(res.loss.size(), 10u);
}

TEST(Trainer, ZeroEpochsReturnsInitialization) {
  Rng rng(2);
  const Dataset d = halves(10, rng);
  TrainConfig tc;
  tc.epochs = 0;
  tc.seed = 9;
  const auto res = train_teacher(d, small_config(2), tc);
  Rng init = SeedSplitter(9).stream("init");
  const VitModel ref = VitModel::init(small_config(2), init, tc.init_scale);
  EXPECT_TRUE(bit_equal(res.model, ref));
  EXPECT_EQ(res.accuracy.size(), 1u);
}

TEST(Trainer, SameSeedIsBitIdentical) {
  Rng rng(3);
  const Dataset d = halves(40, rng);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 8;
  tc.seed = 4;
  tc.hflip = true;
  const auto a = train_teacher(d, small_config(2), tc);
  const auto b = train_teacher(d, small_config(2), tc);
  EXPECT_TRUE(bit_equal(a.model, b.model));
  EXPECT_EQ(a.loss, b.loss);
}

TEST(Trainer, RandomModelIsNearChance) {
  SyntheticConfig sc;
  sc.count = 1000;
  Rng rng(4);
  Dataset d = make_synthetic(sc, rng);
  normalize_in_place(d, synthetic_normalization());
  VitConfig c;
  c.num_layers = 1;
  Rng init(5);
  const double acc = evaluate(VitModel::init(c, init), d);
  EXPECT_GE(acc, 0.05);
  EXPECT_LE(acc, 0.2);
}

TEST(Trainer, SmallStepsDoNotIncreaseBatchLoss) {
  for (std::uint64_t seed : {1, 2, 3}) {
    Rng rng(seed);
    const Dataset d = halves(8, rng);
    VitModel m = VitModel::init(small_config(2), rng, 0.3);
    std::vector<const Tensor*> imgs;
    for (const auto& im : d.images) imgs.push_back(&im);
    double prev = batch_gradient(m, imgs, d.labels, false).loss;
    for (int step = 0; step < 20; ++step) {
      const auto g = batch_gradient(m, imgs, d.labels, false);
      std::size_t i = 0;
      visit_parameters(m.params, [&](const std::string&, Tensor& t) { t.mat() -= 1e-3 * g.grads[i++]; });
      const double now = batch_gradient(m, imgs, d.labels, false).loss;
      EXPECT_LE(now, prev + 1e-12) << "seed " << seed << " step " << step;
      prev = now;
    }
  }
}

TEST(Trainer, EvaluateWithAllPatchesMatchesDefault) {
  Rng rng(6);
  const Dataset d = halves(12, rng);
  const VitModel m = VitModel::init(small_config(2), rng, 0.3);
  const auto all = all_patches(m.config);
  EXPECT_EQ(evaluate(m, d, std::span<const Index>(all)), evaluate(m, d));
}

TEST(Trainer, HflipMirrorsColumns) {
  Tensor t({2, 3, 1});
  for (Index i = 0; i < 6; ++i) t[i] = static_cast<double>(i);
  const Tensor f = hflip(t);
  EXPECT_EQ(f[0], 2.0);
  EXPECT_EQ(f[2], 0.0);
  EXPECT_EQ(f[3], 5.0);
  EXPECT_TRUE(bit_equal(hflip(f), t));
}

TEST(Trainer, InvalidConfigThrows) {
  Rng rng(7);
  const Dataset d = halves(4, rng);
  TrainConfig tc;
  tc.lr = 0.0;
  EXPECT_THROW(train_teacher(d, small_config(2), tc), Error);
  tc = TrainConfig{};
  tc.batch_size = 0;
  EXPECT_THROW(train_teacher(d, small_config(2), tc), Error);
}

TEST(Trainer, DivergenceIsDetected) {
  Rng rng(8);
  const Dataset d = halves(16, rng);
  TrainConfig tc;
  tc.optimizer = Optimizer::Sgd;
  tc.lr = 1e300;
  tc.epochs = 3;
  tc.batch_size = 4;
  try {
    train_teacher(d, small_config(2), tc);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DivergenceDetected);
  }
}
