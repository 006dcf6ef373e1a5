#include <gtest/gtest.h>

#include <cmath>

#include "fd_oracle.hpp"
#include "smi/distill.hpp"
#include "smi/trainer.hpp"

using namespace smi;

namespace {

Tensor row(std::vector<double> v) {
  Tensor t(Shape{1, static_cast<Index>(v.size())});
  std::copy(v.begin(), v.end(), t.values().begin());
  return t;
}

VitConfig small_config() {
  VitConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.num_heads = 2;
  c.num_layers = 1;
  c.ffn_hidden = 16;
  c.num_classes = 3;
  return c;
}

Dataset noise_dataset(const VitConfig& c, int n, Rng& rng) {
  Dataset d;
  d.num_classes = c.num_classes;
  for (int i = 0; i < n; ++i) {
    d.images.push_back(randn({c.image_size, c.image_size, c.channels}, rng));
    d.labels.push_back(i % c.num_classes);
  }
  return d;
}

TransferConfig quick_config() {
  TransferConfig tc;
  tc.temperature = 4.0;
  tc.student_lr = 0.5;
  tc.batch_size = 2;
  tc.iterations = 3;
  tc.inversion.total_iters = 8;
  tc.seed = 1;
  return tc;
}

}  // namespace

TEST(KdLoss, IdenticalLogitsGiveZero) {
  EXPECT_NEAR(kd_loss(row({1.0, -2.0, 0.5}), row({1.0, -2.0, 0.5}), 3.0), 0.0, 1e-15);
}

TEST(KdLoss, TwoClassClosedForm) {
  const double p = 1.0 / (1.0 + std::exp(-1.0));
  EXPECT_NEAR(kd_loss(row({1.0, 0.0}), row({0.0, 1.0}), 1.0), (2 * p - 1) * 1.0, 1e-12);
  EXPECT_NEAR(kd_loss(row({1.0, 0.0}), row({0.0, 1.0}), 1.0), 0.462, 5e-4);
}

TEST(KdLoss, LargeTemperatureVanishes) {
  EXPECT_LT(kd_loss(row({5.0, -3.0, 1.0}), row({-4.0, 2.0, 0.0}), 1e6), 1e-9);
}

TEST(KdLoss, NonNegative) {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    EXPECT_GE(kd_loss(randn({1, 6}, rng, 3.0), randn({1, 6}, rng, 3.0), 0.5 + i * 0.1), 0.0);
  }
}

TEST(KdLoss, GradientsMatchFiniteDifference) {
  Rng rng(4);
  const Tensor t0 = randn({1, 5}, rng, 2.0), s0 = randn({1, 5}, rng, 2.0);
  for (double tau : {1.0, 4.0, 20.0}) {
    Graph<double> g;
    Var<double> t = g.leaf(t0, true), s = g.leaf(s0, true);
    g.backward(kd_loss(t, s, tau));
    const Tensor gt(t0.shape(), g.grad(t)), gs(s0.shape(), g.grad(s));
    const Tensor nt = smi::testing::numeric_gradient([&](const Tensor& x) { return kd_loss(x, s0, tau); }, t0);
    const Tensor ns = smi::testing::numeric_gradient([&](const Tensor& x) { return kd_loss(t0, x, tau); }, s0);
    EXPECT_LT(smi::testing::max_rel_error(gt, nt), 1e-6) << tau;
    EXPECT_LT(smi::testing::max_rel_error(gs, ns), 1e-6) << tau;
  }
}

TEST(IterationsToAccuracy, Examples) {
  TransferReport r;
  r.batch_size = 8;
  r.val_accuracy = {0.1, 0.5, 0.9};
  r.eval_steps = {1, 2, 3};
  const auto hit = iterations_to_accuracy(r, 0.9);
  ASSERT_TRUE(hit);
  EXPECT_EQ(hit->samples, 24u);
  EXPECT_EQ(hit->iterations, 3);
  EXPECT_FALSE(iterations_to_accuracy(r, 0.95));
  int prev = 0;
  for (double th = 0.05; th <= 0.9; th += 0.05) {
    const int t = iterations_to_accuracy(r, th)->iterations;
    EXPECT_GE(t, prev);
    prev = t;
  }
}

TEST(IterationsToAccuracy, UsesLoggedSteps) {
  TransferReport r;
  r.batch_size = 4;
  r.val_accuracy = {0.2, 0.7};
  r.eval_steps = {5, 10};
  EXPECT_EQ(iterations_to_accuracy(r, 0.6)->samples, 40u);
}

TEST(Transfer, TeacherAsStudentStaysAtFixedPoint) {
  const VitConfig c = small_config();
  Rng rng(5);
  const VitModel teacher = VitModel::init(c, rng, 0.5);
  const Dataset val = noise_dataset(c, 12, rng);
  const auto res = transfer(teacher, teacher, quick_config(), val);
  ASSERT_EQ(res.report.loss.size(), 3u);
  for (double l : res.report.loss) EXPECT_LT(l, 1e-12);
  EXPECT_EQ(res.report.samples, 6u);
}

TEST(Transfer, LinearProbeTouchesOnlyHead) {
  const VitConfig c = small_config();
  Rng rng(6);
  const VitModel teacher = VitModel::init(c, rng, 0.5);
  Rng hr(1);
  const VitModel student = reset_head(teacher, hr);
  const Dataset val = noise_dataset(c, 12, rng);
  const auto res = transfer(teacher, student, quick_config(), val);
  std::vector<std::string> changed;
  zip_parameters(student.params, res.student.params, [&](const std::string& name, const Tensor& a, const Tensor& b) {
    if (!bit_equal(a, b)) changed.push_back(name);
  });
  EXPECT_EQ(changed, (std::vector<std::string>{"head.weight", "head.bias"}));
}

TEST(Transfer, FullModeUpdatesBackbone) {
  const VitConfig c = small_config();
  Rng rng(7);
  const VitModel teacher = VitModel::init(c, rng, 0.5);
  const VitModel student = VitModel::init(c, rng, 0.5);
  TransferConfig tc = quick_config();
  tc.probe_mode = ProbeMode::Full;
  const auto res = transfer(teacher, student, tc, noise_dataset(c, 6, rng));
  EXPECT_FALSE(bit_equal(student.params.layers[0].wq, res.student.params.layers[0].wq));
}

TEST(Transfer, EmptyScheduleEqualsDense) {
  const VitConfig c = small_config();
  Rng rng(8);
  const VitModel teacher = VitModel::init(c, rng, 0.5);
  const VitModel student = VitModel::init(c, rng, 0.5);
  const Dataset val = noise_dataset(c, 9, rng);
  TransferConfig tc = quick_config();
  const auto dense = transfer(teacher, student, tc, val);
  tc.schedule = StopSchedule{};
  const auto none = transfer(teacher, student, tc, val);
  EXPECT_EQ(dense.report.loss, none.report.loss);
  EXPECT_EQ(dense.report.val_accuracy, none.report.val_accuracy);
  EXPECT_TRUE(bit_equal(dense.student, none.student));
}

TEST(Transfer, SparseScheduleFeedsRetainedPatches) {
  const VitConfig c = small_config();  // 4 patches
  Rng rng(9);
  const VitModel teacher = VitModel::init(c, rng, 0.5);
  const VitModel student = VitModel::init(c, rng, 0.5);
  TransferConfig tc = quick_config();
  tc.schedule = StopSchedule{{{2, 0.5}}};
  tc.eval_every = 2;
  const auto res = transfer(teacher, student, tc, noise_dataset(c, 6, rng));
  EXPECT_DOUBLE_EQ(res.report.mean_sparsity, 0.5);
  EXPECT_EQ(res.report.eval_steps, (std::vector<int>{2, 3}));
}

TEST(Transfer, ConfigValidation) {
  const VitConfig c = small_config();
  Rng rng(10);
  const VitModel m = VitModel::init(c, rng);
  const Dataset val = noise_dataset(c, 3, rng);
  TransferConfig tc = quick_config();
  tc.temperature = 0.0;
  EXPECT_THROW(transfer(m, m, tc, val), Error);
  tc = quick_config();
  tc.schedule = StopSchedule{{{20, 0.5}}};
  try {
    transfer(m, m, tc, val);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ScheduleOutOfRange);
  }
}

TEST(ResetHead, KeepsBackbone) {
  Rng rng(11);
  const VitModel m = VitModel::init(small_config(), rng, 0.5);
  Rng hr(2);
  const VitModel r = reset_head(m, hr);
  EXPECT_TRUE(bit_equal(m.params.layers[0].ffn1_w, r.params.layers[0].ffn1_w));
  EXPECT_FALSE(bit_equal(m.params.head_w, r.params.head_w));
  for (double v : r.params.head_b.values()) EXPECT_EQ(v, 0.0);
}
