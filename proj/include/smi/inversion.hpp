#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "smi/vit.hpp"

namespace smi {

/// Stop `fraction` of the currently retained patches once `iteration`
/// iterations have completed, ranked by the attention of the last one.
struct StopStage {
  int iteration;
  double fraction;
};

struct StopSchedule {
  std::vector<StopStage> stages;

  /// 30% of the retained patches at iterations 50, 100, 200 and 300.
  static StopSchedule standard();
  /// Same stages with an arbitrary per-stage fraction, at iterations scaled
  /// by total_iters / 400.
  static StopSchedule four_stage(double fraction, int total_iters = 400);

  bool empty() const { return stages.empty(); }
  /// Throws ScheduleOutOfRange unless iterations are strictly increasing in
  /// [1, total_iters) and every fraction is in (0,1).
  void validate(int total_iters) const;
};

struct StopEvent {
  int iteration;
  std::vector<Index> stopped;  // in ranking order, most important first
};

/// Inversion canvas with its retained-patch mask. Patch indices are 0-based.
struct SparseImage {
  Tensor canvas;                // [H,W,C], model space
  int patch_size = 0;
  std::vector<Index> retained;  // ascending
  std::vector<StopEvent> history;

  Index num_patches() const;
  std::vector<Index> stopped() const;
  bool is_stopped(Index patch) const;
  /// Fraction of patches whose inversion has stopped.
  double sparsity() const;
  /// Canvas with every stopped patch set to `fill`.
  Tensor masked(double fill = 0.0) const;
  /// Throws InvalidArgument if history and retained do not partition the patches.
  void check_invariants() const;
};

enum class InitKind { Normal, Uniform };

struct InversionConfig {
  int total_iters = 400;
  double lr = 0.25;
  double alpha_r = 1e-4;
  int label = 0;
  std::uint64_t seed = 0;
  InitKind init = InitKind::Normal;
  double init_scale = 1.0;  // stddev, or half-width for Uniform

  void validate(const VitConfig& vit) const;
};

/// Initial canvas drawn from the configured distribution and seed.
Tensor initial_canvas(const VitConfig& vit, const InversionConfig& config);

/// Total variation over the four neighbor directions (down, right, down-right,
/// down-left), summing the L2 norm of each pixel-vector difference. Only pairs
/// with both pixels inside `patches` count. `x` holds one patchified row per
/// entry of `patches`.
Var<double> tv_regularizer(const Var<double>& x, std::span<const Index> patches, const VitConfig& vit);
/// Value-only form over an [H,W,C] image.
double tv_regularizer(const Tensor& image, std::span<const Index> patches, int patch_size);

struct InversionLoss {
  Var<double> total;  // cls + alpha_r·TV
  Var<double> cls;
  ForwardResult forward;
};

/// cross_entropy(forward over `patches`, label) + alpha_r·TV over the same
/// patches. `x` holds one patchified row per entry of `patches`.
InversionLoss inversion_loss(const VitConfig& vit, const ModelVars& vars, const Var<double>& x,
                             std::span<const Index> patches, int label, double alpha_r);
/// Value-only form over the retained patches of `image`.
double inversion_loss(const VitModel& model, const SparseImage& image, int label, double alpha_r);

/// Patches of `retained` sorted by descending attention; ties go to the
/// smaller patch index. Throws StaleAttention when sizes differ.
std::vector<Index> identify_semantic_patches(const Tensor& a_cls, std::span<const Index> retained);

/// Number of patches a stage removes from `retained` patches: ceil(n·p),
/// leaving at least one.
Index stop_count(Index retained, double fraction);

/// Moves the ceil(|R|·p) lowest-ranked patches into history.
void apply_stop_stage(SparseImage& image, std::span<const Index> ranking, double fraction, int iteration);

/// Retained-patch count after each stage of `schedule`, starting from `patches`.
std::vector<Index> retained_counts(const StopSchedule& schedule, Index patches);

struct InversionTrace {
  std::vector<double> loss;      // full objective per iteration
  std::vector<double> cls_loss;  // classification term per iteration
  std::vector<int> tokens;       // tokens per layer (retained + CLS)
  std::vector<MacCounter> macs;  // instrumented multiply-accumulates
  std::vector<double> seconds;   // wall clock per iteration
  double total_seconds = 0.0;
};

struct InversionResult {
  SparseImage image;
  InversionTrace trace;
  // cls_attention of the final iteration, over image.retained.
  Tensor attention;
};

struct InversionHooks {
  // Called after every iteration's update, with the 0-based iteration index.
  std::function<void(int, const SparseImage&)> on_iteration;
  // Starting canvas; defaults to initial_canvas(config).
  std::optional<Tensor> init;
  // Only these patches receive updates; the rest of the retained set is fed
  // forward unchanged. Defaults to every retained patch.
  std::optional<std::vector<Index>> trainable;
};

/// Sparse model inversion. Each iteration feeds only the retained patches,
/// minimizes cross_entropy + alpha_r·TV with Adam on their pixels, and at each
/// scheduled stage stops the least-attended patches for good. No schedule
/// (or an empty one) keeps every patch.
InversionResult invert(const VitModel& model, const InversionConfig& config, const StopSchedule* schedule = nullptr,
                       const InversionHooks& hooks = {});

/// Dense inversion on the whole canvas, written without any patch bookkeeping.
InversionResult invert_dense(const VitModel& model, const InversionConfig& config);

/// Inverts one image per label; image i uses seed derived from config.seed and i.
std::vector<InversionResult> invert_batch(const VitModel& model, const InversionConfig& config,
                                          std::span<const int> labels, const StopSchedule* schedule);

}  // namespace smi
