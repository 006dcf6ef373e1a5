#include "smi/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace smi {

QuantRange QuantRange::make(double t_min, double t_max, int bits) {
  if (bits < 1 || bits > 32) throw Error(ErrorCode::InvalidArgument, "bit width must be in [1, 32]");
  if (!(t_max > t_min)) {
    throw Error(ErrorCode::DegenerateRange,
                "range [" + std::to_string(t_min) + ", " + std::to_string(t_max) + "] is empty");
  }
  return QuantRange{t_min, t_max, bits};
}

double QuantRange::levels() const { return std::ldexp(1.0, bits) - 1.0; }

double QuantRange::scale() const { return (t_max - t_min) / levels(); }

double quantize_dequantize(double x, const QuantRange& r) {
  if (!(r.t_max > r.t_min)) throw Error(ErrorCode::DegenerateRange, "quantization range is empty");
  const double s = r.scale();
  const double half = s / 2.0;
  const double xc = std::clamp(x, r.t_min, r.t_max);
  const double top = r.levels();
  auto value = [&](double level) {
    if (level >= top) return r.t_max;
    return std::clamp(level * s + r.t_min, r.t_min, r.t_max);
  };
  const double level = std::clamp(std::nearbyint((xc - r.t_min) / s), 0.0, top);
  double y = value(level);
  if (std::abs(xc - y) > half) {
    // The division rounded across a midpoint; the neighbor is closer.
    const double alt = std::clamp(level + (xc > y ? 1.0 : -1.0), 0.0, top);
    y = value(alt);
  }
  return y;
}

Tensor quantize_dequantize(const Tensor& x, const QuantRange& r) {
  Tensor out = x;
  out.node_id.reset();
  for (auto& v : out.values()) v = quantize_dequantize(v, r);
  return out;
}

QuantRange tensor_range(const Tensor& t, int bits) {
  if (t.numel() == 0) throw Error(ErrorCode::DegenerateRange, "range of an empty tensor");
  const double lo = t.mat().minCoeff(), hi = t.mat().maxCoeff();
  return QuantRange::make(lo, hi > lo ? hi : lo + 1e-8, bits);
}

nlohmann::json QuantPlan::to_json() const {
  nlohmann::json j;
  j["k_weights"] = k_weights;
  j["k_acts"] = k_acts;
  auto dump = [](const std::map<std::string, QuantRange>& m) {
    nlohmann::json o = nlohmann::json::object();
    for (const auto& [name, r] : m) o[name] = {{"T_min", r.t_min}, {"T_max", r.t_max}, {"k", r.bits}};
    return o;
  };
  j["weights"] = dump(weights);
  j["activations"] = dump(activations);
  return j;
}

QuantPlan QuantPlan::from_json(const nlohmann::json& j) {
  QuantPlan p;
  try {
    p.k_weights = j.at("k_weights").get<int>();
    p.k_acts = j.at("k_acts").get<int>();
    auto load = [](const nlohmann::json& o, std::map<std::string, QuantRange>& m) {
      for (const auto& [name, r] : o.items()) {
        m[name] = QuantRange::make(r.at("T_min").get<double>(), r.at("T_max").get<double>(), r.at("k").get<int>());
      }
    };
    load(j.at("weights"), p.weights);
    load(j.at("activations"), p.activations);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("quant plan: ") + e.what());
  }
  return p;
}

std::map<std::string, QuantRange> weight_ranges(const VitModel& model, int bits) {
  std::map<std::string, QuantRange> out;
  visit_parameters(model.params, [&](const std::string& name, const Tensor& t) {
    if (is_linear_weight(name)) out.emplace(name, tensor_range(t, bits));
  });
  return out;
}

namespace {

class RangeRecorder : public ActivationHook {
 public:
  explicit RangeRecorder(const VitConfig& config) : config_(config) {
    const auto sites = activation_sites(config);
    lo_.assign(sites.size(), std::numeric_limits<double>::infinity());
    hi_.assign(sites.size(), -std::numeric_limits<double>::infinity());
  }

  Var<double> on_activation(const SiteId& site, const Var<double>& x) override {
    const std::size_t s = site_slot(config_, site);
    lo_[s] = std::min(lo_[s], x.value().minCoeff());
    hi_[s] = std::max(hi_[s], x.value().maxCoeff());
    return x;
  }

  std::map<std::string, QuantRange> ranges(int bits) const {
    std::map<std::string, QuantRange> out;
    const auto sites = activation_sites(config_);
    for (std::size_t i = 0; i < sites.size(); ++i) {
      out.emplace(sites[i].name(), QuantRange::make(lo_[i], hi_[i] > lo_[i] ? hi_[i] : lo_[i] + 1e-8, bits));
    }
    return out;
  }

 private:
  const VitConfig& config_;
  std::vector<double> lo_, hi_;
};

}  // namespace

std::map<std::string, QuantRange> calibrate_activations(const VitModel& model, std::span<const SparseImage> images,
                                                        int bits) {
  if (images.empty()) throw Error(ErrorCode::EmptyCalibration, "calibration set is empty");
  RangeRecorder rec(model.config);
  const ForwardOptions opts{&rec, false};
  for (const auto& img : images) predict(model, img.canvas, img.retained, opts);
  return rec.ranges(bits);
}

std::vector<SparseImage> gaussian_calibration_set(const VitConfig& vit, std::size_t count, Rng& rng, double stddev) {
  std::vector<SparseImage> out;
  for (std::size_t i = 0; i < count; ++i) {
    SparseImage s;
    s.canvas = randn({vit.image_size, vit.image_size, vit.channels}, rng, stddev);
    s.patch_size = vit.patch_size;
    s.retained = all_patches(vit);
    out.push_back(std::move(s));
  }
  return out;
}

QuantPlan make_plan(const VitModel& model, std::span<const SparseImage> calibration, int k_weights, int k_acts) {
  QuantPlan p;
  p.k_weights = k_weights;
  p.k_acts = k_acts;
  p.weights = weight_ranges(model, k_weights);
  p.activations = calibrate_activations(model, calibration, k_acts);
  return p;
}

VitModel quantize_weights(const VitModel& model, const QuantPlan& plan) {
  VitModel q = model;
  visit_parameters(q.params, [&](const std::string& name, Tensor& t) {
    auto it = plan.weights.find(name);
    if (it != plan.weights.end()) t = quantize_dequantize(t, it->second);
  });
  return q;
}

QuantizingHook::QuantizingHook(const QuantPlan& plan) : plan_(plan) {}

Var<double> QuantizingHook::on_activation(const SiteId& site, const Var<double>& x) {
  auto it = plan_.activations.find(site.name());
  if (it == plan_.activations.end()) return x;
  const QuantRange r = it->second;
  return map_straight_through(x, [r](double v) { return quantize_dequantize(v, r); });
}

double evaluate_quantized(const VitModel& model, const QuantPlan& plan, const Dataset& data) {
  const VitModel q = quantize_weights(model, plan);
  QuantizingHook hook(plan);
  const ForwardOptions opts{&hook, false};
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (argmax(predict(q, data.images[i], opts).logits) == data.labels[i]) ++correct;
  }
  return data.size() ? static_cast<double>(correct) / static_cast<double>(data.size()) : 0.0;
}

}  // namespace smi
