#include "smi/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "smi/tensor/optim.hpp"

namespace smi {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw Error(ErrorCode::InvalidArgument, "TrainConfig: lr must be positive");
  if (batch_size < 1) throw Error(ErrorCode::InvalidArgument, "TrainConfig: batch_size must be >= 1");
  if (epochs < 0) throw Error(ErrorCode::InvalidArgument, "TrainConfig: epochs must be >= 0");
  if (!(init_scale > 0.0)) throw Error(ErrorCode::InvalidArgument, "TrainConfig: init_scale must be positive");
}

Tensor hflip(const Tensor& image) {
  const Index h = image.dim(0), w = image.dim(1), c = image.dim(2);
  Tensor out(image.shape());
  for (Index r = 0; r < h; ++r)
    for (Index x = 0; x < w; ++x)
      for (Index k = 0; k < c; ++k) out[(r * w + x) * c + k] = image[(r * w + (w - 1 - x)) * c + k];
  return out;
}

BatchGradient batch_gradient(const VitModel& model, std::span<const Tensor* const> images,
                             std::span<const int> labels, bool head_only) {
  const auto& cfg = model.config;
  Graph<double> g;
  ModelVars vars;
  vars.layers.resize(model.params.layers.size());
  zip_parameters(model.params, vars, [&](const std::string& name, const Tensor& t, Var<double>& v) {
    v = g.param(t, !head_only || is_head_parameter(name));
  });
  const auto all = all_patches(cfg);
  BatchGradient out;
  Var<double> total;
  for (std::size_t i = 0; i < images.size(); ++i) {
    Var<double> x = g.leaf(patchify(*images[i], cfg.patch_size));
    Var<double> logits = forward(cfg, vars, x, all, {nullptr, false}).logits;
    if (argmax(logits.tensor()) == labels[i]) ++out.correct;
    Var<double> ce = cross_entropy(logits, labels[i]);
    total = total.valid() ? total + ce : ce;
  }
  Var<double> loss = scale(total, 1.0 / static_cast<double>(images.size()));
  out.loss = loss.item();
  if (!std::isfinite(out.loss)) throw Error(ErrorCode::DivergenceDetected, "training loss is not finite");
  g.backward(loss);
  visit_parameters(vars, [&](const std::string&, const Var<double>& v) { out.grads.push_back(g.grad(v)); });
  return out;
}

TrainResult train_from(VitModel model, const Dataset& data, const TrainConfig& config) {
  config.validate();
  if (data.num_classes < 2) throw Error(ErrorCode::InvalidArgument, "training needs at least two classes");
  if (data.size() == 0) throw Error(ErrorCode::InvalidArgument, "training set is empty");
  SeedSplitter seeds(config.seed);
  Rng shuffle_rng = seeds.stream("data");

  std::vector<std::string> names;
  visit_parameters(model.params, [&](const std::string& n, const Tensor&) { names.push_back(n); });
  std::vector<AdamState<double>> states(names.size());
  const AdamOptions adam{config.lr};

  TrainResult result;
  result.accuracy.push_back(evaluate(model, data));

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0u);
  std::vector<Tensor> flipped;
  std::vector<const Tensor*> batch;
  std::vector<int> labels;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      batch.clear();
      labels.clear();
      flipped.clear();
      flipped.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const Tensor& img = data.images[order[i]];
        if (config.hflip && std::bernoulli_distribution(0.5)(shuffle_rng)) {
          flipped.push_back(hflip(img));
          batch.push_back(&flipped.back());
        } else {
          batch.push_back(&img);
        }
        labels.push_back(data.labels[order[i]]);
      }
      BatchGradient bg = batch_gradient(model, batch, labels, config.head_only);
      loss_sum += bg.loss;
      ++batches;
      std::size_t k = 0;
      visit_parameters(model.params, [&](const std::string& name, Tensor& t) {
        const std::size_t i = k++;
        if (config.head_only && !is_head_parameter(name)) return;
        if (config.optimizer == Optimizer::Adam) {
          adam_step(t, bg.grads[i], states[i], adam);
        } else {
          sgd_step(t, bg.grads[i], config.lr);
        }
      });
      model.round_to_float();
    }
    if (!model.all_finite()) throw Error(ErrorCode::DivergenceDetected, "parameters became non-finite");
    result.loss.push_back(loss_sum / static_cast<double>(batches));
    result.accuracy.push_back(evaluate(model, data));
  }
  result.model = std::move(model);
  return result;
}

TrainResult train_teacher(const Dataset& data, const VitConfig& vit, const TrainConfig& config) {
  config.validate();
  Rng init_rng = SeedSplitter(config.seed).stream("init");
  VitModel model = VitModel::init(vit, init_rng, config.init_scale);
  return train_from(std::move(model), data, config);
}

double evaluate(const VitModel& model, const Dataset& data, std::optional<std::span<const Index>> retained) {
  if (data.size() == 0) return 0.0;
  const auto all = all_patches(model.config);
  const std::span<const Index> idx = retained ? *retained : std::span<const Index>(all);
  const ForwardOptions opts{nullptr, false};
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (argmax(predict(model, data.images[i], idx, opts).logits) == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace smi
