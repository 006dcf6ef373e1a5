#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "smi/dataset.hpp"
#include "smi/inversion.hpp"
#include "smi/vit.hpp"

namespace smi {

enum class ProbeMode { Linear, Full };

struct TransferConfig {
  double temperature = 20.0;
  double student_lr = 0.1;
  int batch_size = 8;
  int iterations = 50;
  ProbeMode probe_mode = ProbeMode::Linear;
  std::optional<StopSchedule> schedule;
  // Inversion settings for each batch; label and seed are set per image.
  InversionConfig inversion;
  std::uint64_t seed = 0;
  int eval_every = 1;

  void validate(const VitConfig& vit) const;
};

struct TransferReport {
  std::vector<double> loss;          // mean kd_loss per iteration, before the update
  std::vector<int> eval_steps;       // 1-based iteration after which accuracy was measured
  std::vector<double> val_accuracy;  // one per entry of eval_steps
  std::size_t samples = 0;           // inverted images consumed
  int iterations = 0;
  int batch_size = 0;
  double inversion_seconds = 0.0;
  double mean_sparsity = 0.0;
};

struct TransferResult {
  TransferReport report;
  VitModel student;
};

/// KL(softmax(teacher/τ) ‖ softmax(student/τ)) for single-row logits, with
/// gradients to both arguments.
Var<double> kd_loss(const Var<double>& teacher_logits, const Var<double>& student_logits, double temperature);
double kd_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature);

/// Alternates inverting a fresh batch from the teacher and one SGD step of the
/// student on kd_loss. Both models see only the retained patches of each
/// inverted image; validation uses full images.
TransferResult transfer(const VitModel& teacher, VitModel student, const TransferConfig& config,
                        const Dataset& validation);

struct ThresholdHit {
  std::size_t samples;  // N = batch × T
  int iterations;       // T
};
/// First logged step whose validation accuracy reaches `threshold`.
std::optional<ThresholdHit> iterations_to_accuracy(const TransferReport& report, double threshold);

/// Copy of `model` with a freshly initialized classifier head.
VitModel reset_head(const VitModel& model, Rng& rng, double stddev = 0.02);

}  // namespace smi
