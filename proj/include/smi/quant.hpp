#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "smi/dataset.hpp"
#include "smi/inversion.hpp"
#include "smi/vit.hpp"

namespace smi {

struct QuantRange {
  double t_min = 0.0;
  double t_max = 1.0;
  int bits = 8;

  /// Throws DegenerateRange unless t_max > t_min, and InvalidArgument for
  /// bits outside [1, 32].
  static QuantRange make(double t_min, double t_max, int bits);
  double scale() const;
  double levels() const;  // 2^k − 1
};

/// Clip, shift, scale, round half to even, then map back.
double quantize_dequantize(double x, const QuantRange& r);
Tensor quantize_dequantize(const Tensor& x, const QuantRange& r);

/// Range of a tensor's values; a constant tensor c gets [c, c + 1e-8].
QuantRange tensor_range(const Tensor& t, int bits);

struct QuantPlan {
  int k_weights = 8;
  int k_acts = 8;
  std::map<std::string, QuantRange> weights;      // parameter name -> range
  std::map<std::string, QuantRange> activations;  // SiteId::name() -> range

  nlohmann::json to_json() const;
  static QuantPlan from_json(const nlohmann::json& j);
};

/// Per-tensor min/max of every linear-map weight.
std::map<std::string, QuantRange> weight_ranges(const VitModel& model, int bits);

/// Running min/max at every activation site while feeding each image's
/// retained patches through the full-precision model. Throws EmptyCalibration.
std::map<std::string, QuantRange> calibrate_activations(const VitModel& model, std::span<const SparseImage> images,
                                                        int bits);

/// All-patch calibration images drawn per pixel from N(0, stddev²).
std::vector<SparseImage> gaussian_calibration_set(const VitConfig& vit, std::size_t count, Rng& rng,
                                                  double stddev = 1.0);

QuantPlan make_plan(const VitModel& model, std::span<const SparseImage> calibration, int k_weights, int k_acts);

/// Copy of the model with every planned weight fake-quantized.
VitModel quantize_weights(const VitModel& model, const QuantPlan& plan);

/// Hook applying fake quantization at every planned activation site.
class QuantizingHook : public ActivationHook {
 public:
  explicit QuantizingHook(const QuantPlan& plan);
  Var<double> on_activation(const SiteId& site, const Var<double>& x) override;

 private:
  const QuantPlan& plan_;
};

/// Top-1 accuracy of the fake-quantized model on full images.
double evaluate_quantized(const VitModel& model, const QuantPlan& plan, const Dataset& data);

}  // namespace smi
