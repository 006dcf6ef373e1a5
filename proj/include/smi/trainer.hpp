#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "smi/dataset.hpp"
#include "smi/vit.hpp"

namespace smi {

enum class Optimizer { Adam, Sgd };

struct TrainConfig {
  int epochs = 10;
  int batch_size = 32;
  double lr = 1e-3;
  Optimizer optimizer = Optimizer::Adam;
  std::uint64_t seed = 0;
  double init_scale = 0.02;
  bool hflip = false;
  // Updates only the classifier head; everything else stays frozen.
  bool head_only = false;

  // Throws InvalidArgument.
  void validate() const;
};

struct TrainResult {
  VitModel model;
  // accuracy[0] is the initial model; accuracy[e] follows epoch e, measured
  // on the training set with the end-of-epoch parameters.
  std::vector<double> accuracy;
  // Mean training loss per epoch.
  std::vector<double> loss;
};

/// Trains a freshly initialized ViT. Deterministic given config.seed.
/// Parameters are held at float precision after every step.
TrainResult train_teacher(const Dataset& data, const VitConfig& vit, const TrainConfig& config);

/// Continues training an existing model with the same loop.
TrainResult train_from(VitModel model, const Dataset& data, const TrainConfig& config);

/// Mean cross-entropy and its gradient over a batch, accumulated per parameter
/// in zip_parameters order.
struct BatchGradient {
  double loss = 0.0;
  std::size_t correct = 0;
  std::vector<RowMatrix<double>> grads;
};
BatchGradient batch_gradient(const VitModel& model, std::span<const Tensor* const> images,
                             std::span<const int> labels, bool head_only);

/// Top-1 accuracy, optionally feeding only the `retained` patches of each image.
double evaluate(const VitModel& model, const Dataset& data,
                std::optional<std::span<const Index>> retained = std::nullopt);

Tensor hflip(const Tensor& image);

}  // namespace smi
