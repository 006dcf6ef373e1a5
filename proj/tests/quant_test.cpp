#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "smi/quant.hpp"
#include "smi/trainer.hpp"

using namespace smi;

namespace {

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

// Records per-site extrema with a plain loop over the activation values.
class Extrema : public ActivationHook {
 public:
  Var<double> on_activation(const SiteId& site, const Var<double>& x) override {
    auto [it, fresh] = ranges.try_emplace(site.name(), std::numeric_limits<double>::infinity(),
                                          -std::numeric_limits<double>::infinity());
    for (Index r = 0; r < x.rows(); ++r) {
      for (Index c = 0; c < x.cols(); ++c) {
        it->second.first = std::min(it->second.first, x.value()(r, c));
        it->second.second = std::max(it->second.second, x.value()(r, c));
      }
    }
    return x;
  }
  std::map<std::string, std::pair<double, double>> ranges;
};

SparseImage full_image(const VitConfig& c, Rng& rng) {
  SparseImage s;
  s.canvas = randn({c.image_size, c.image_size, c.channels}, rng);
  s.patch_size = c.patch_size;
  s.retained = all_patches(c);
  return s;
}

}  // namespace

TEST(QuantizeDequantize, UnitScale) {
  const auto r = QuantRange::make(0.0, 255.0, 8);
  EXPECT_EQ(r.scale(), 1.0);
  EXPECT_EQ(quantize_dequantize(37.4, r), 37.0);
  EXPECT_EQ(quantize_dequantize(-12.0, r), 0.0);
  EXPECT_EQ(quantize_dequantize(300.0, r), 255.0);
}

TEST(QuantizeDequantize, HalfRoundsToEven) {
  const auto r = QuantRange::make(0.0, 255.0, 8);
  EXPECT_EQ(quantize_dequantize(36.5, r), 36.0);
  EXPECT_EQ(quantize_dequantize(37.5, r), 38.0);
}

TEST(QuantizeDequantize, BelowRangeIsTminExactly) {
  const auto r = QuantRange::make(-0.37, 1.91, 4);
  EXPECT_EQ(quantize_dequantize(-5.0, r), -0.37);
  EXPECT_EQ(quantize_dequantize(9.0, r), 1.91);
}

TEST(QuantizeDequantize, BoundAndIdempotence) {
  Rng rng(17);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  std::uniform_int_distribution<int> bits(2, 12);
  for (int trial = 0; trial < 500; ++trial) {
    double a = u(rng), b = u(rng);
    if (a == b) continue;
    const auto r = QuantRange::make(std::min(a, b), std::max(a, b), bits(rng));
    const Tensor x = randn({7, 5}, rng, 2.0);
    const Tensor q = quantize_dequantize(x, r);
    const Tensor qq = quantize_dequantize(q, r);
    for (Index i = 0; i < x.numel(); ++i) {
      const double xc = std::clamp(x[i], r.t_min, r.t_max);
      EXPECT_LE(std::abs(xc - q[i]), r.scale() / 2);
      EXPECT_GE(q[i], r.t_min);
      EXPECT_LE(q[i], r.t_max);
      EXPECT_EQ(q[i], qq[i]);
    }
  }
}

TEST(QuantRange, Errors) {
  auto code = [](auto f) {
    try {
      f();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::IoError;
  };
  EXPECT_EQ(code([] { QuantRange::make(1.0, 1.0, 8); }), ErrorCode::DegenerateRange);
  EXPECT_EQ(code([] { QuantRange::make(2.0, 1.0, 8); }), ErrorCode::DegenerateRange);
  EXPECT_EQ(code([] { QuantRange::make(0.0, 1.0, 0); }), ErrorCode::InvalidArgument);
}

TEST(TensorRange, MinMaxAndConstant) {
  Tensor t({3});
  t[0] = -1.0;
  t[1] = 0.0;
  t[2] = 2.0;
  const auto r = tensor_range(t, 8);
  EXPECT_EQ(r.t_min, -1.0);
  EXPECT_EQ(r.t_max, 2.0);

  Tensor c({4});
  c.mat().setConstant(0.25);
  const auto rc = tensor_range(c, 8);
  EXPECT_EQ(rc.t_min, 0.25);
  EXPECT_GT(rc.t_max, 0.25);
  const Tensor q = quantize_dequantize(c, rc);
  for (double v : q.values()) EXPECT_EQ(v, 0.25);
}

TEST(WeightRanges, CoverEveryLinearWeight) {
  Rng rng(2);
  const VitModel m = VitModel::init(small_config(), rng, 0.5);
  const auto ranges = weight_ranges(m, 4);
  std::size_t linear = 0;
  visit_parameters(m.params, [&](const std::string& name, const Tensor& t) {
    if (!is_linear_weight(name)) {
      EXPECT_EQ(ranges.count(name), 0u) << name;
      return;
    }
    ++linear;
    const auto& r = ranges.at(name);
    const Tensor q = quantize_dequantize(t, r);
    for (Index i = 0; i < t.numel(); ++i) {
      EXPECT_GE(t[i], r.t_min);
      EXPECT_LE(t[i], r.t_max);
      EXPECT_LE(std::abs(t[i] - q[i]), r.scale() / 2);
    }
  });
  EXPECT_EQ(ranges.size(), linear);
  EXPECT_EQ(linear, 8u);  // patch embed, q, k, v, o, ffn1, ffn2, head
}

TEST(Calibration, SingleImageEqualsSiteExtrema) {
  Rng rng(3);
  const VitModel m = VitModel::init(small_config(), rng, 0.5);
  SparseImage img = full_image(m.config, rng);
  img.retained = {0, 2, 3};
  Extrema e;
  predict(m, img.canvas, img.retained, {&e, false});
  const auto ranges = calibrate_activations(m, std::span<const SparseImage>(&img, 1), 8);
  ASSERT_EQ(ranges.size(), e.ranges.size());
  for (const auto& [name, mm] : e.ranges) {
    EXPECT_EQ(ranges.at(name).t_min, mm.first) << name;
    EXPECT_EQ(ranges.at(name).t_max, mm.second) << name;
  }
}

TEST(Calibration, SupersetContainsSubsetRanges) {
  Rng rng(4);
  const VitModel m = VitModel::init(small_config(), rng, 0.5);
  std::vector<SparseImage> set;
  for (int i = 0; i < 6; ++i) set.push_back(full_image(m.config, rng));
  const auto sub = calibrate_activations(m, std::span<const SparseImage>(set.data(), 3), 8);
  const auto all = calibrate_activations(m, set, 8);
  for (const auto& [name, r] : sub) {
    EXPECT_LE(all.at(name).t_min, r.t_min);
    EXPECT_GE(all.at(name).t_max, r.t_max);
  }
}

TEST(Calibration, EmptySetThrows) {
  Rng rng(5);
  const VitModel m = VitModel::init(small_config(), rng);
  try {
    calibrate_activations(m, std::span<const SparseImage>(), 8);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyCalibration);
  }
}

TEST(Calibration, ActivationSitesAreQuantizationSurface) {
  Rng rng(6);
  const VitModel m = VitModel::init(small_config(), rng, 0.5);
  const auto set = gaussian_calibration_set(m.config, 2, rng);
  const QuantPlan plan = make_plan(m, set, 8, 8);
  EXPECT_EQ(plan.activations.size(), activation_sites(m.config).size());
  for (const auto& s : activation_sites(m.config)) EXPECT_EQ(plan.activations.count(s.name()), 1u) << s.name();
}

TEST(EvaluateQuantized, WideBitsMatchFullPrecision) {
  const VitConfig c = small_config();
  Rng rng(7);
  const VitModel m = VitModel::init(c, rng, 0.5);
  Dataset d;
  d.num_classes = c.num_classes;
  for (int i = 0; i < 40; ++i) {
    d.images.push_back(randn({c.image_size, c.image_size, 1}, rng));
    d.labels.push_back(i % c.num_classes);
  }
  std::vector<SparseImage> cal;
  for (const auto& im : d.images) cal.push_back(SparseImage{im, c.patch_size, all_patches(c), {}});
  const QuantPlan plan = make_plan(m, cal, 32, 32);
  EXPECT_EQ(evaluate_quantized(m, plan, d), evaluate(m, d));
}

TEST(QuantPlan, JsonRoundTrip) {
  Rng rng(8);
  const VitModel m = VitModel::init(small_config(), rng, 0.5);
  const auto set = gaussian_calibration_set(m.config, 2, rng);
  const QuantPlan plan = make_plan(m, set, 4, 8);
  const QuantPlan back = QuantPlan::from_json(nlohmann::json::parse(plan.to_json().dump()));
  EXPECT_EQ(back.k_weights, 4);
  EXPECT_EQ(back.k_acts, 8);
  ASSERT_EQ(back.activations.size(), plan.activations.size());
  for (const auto& [name, r] : plan.activations) {
    EXPECT_EQ(back.activations.at(name).t_min, r.t_min);
    EXPECT_EQ(back.activations.at(name).t_max, r.t_max);
    EXPECT_EQ(back.activations.at(name).bits, 8);
  }
  const auto j = plan.to_json();
  EXPECT_TRUE(j["weights"].begin().value().contains("T_min"));
  try {
    QuantPlan::from_json(nlohmann::json::parse(R"({"k_weights": 4})"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ConfigError);
  }
}
