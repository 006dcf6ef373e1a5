#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "smi/dataset.hpp"
#include "smi/distill.hpp"
#include "smi/inversion.hpp"
#include "smi/vit.hpp"

namespace smi {

/// Multiply-accumulates of one self-attention block: 3LD² + 2L²D.
std::int64_t flops_sa(std::int64_t tokens, std::int64_t dim);
/// Multiply-accumulates of one feed-forward block with a 4D hidden layer: 8LD².
std::int64_t flops_ffn(std::int64_t tokens, std::int64_t dim);

/// Forward multiply-accumulates of one pass. Per-layer fields are for a
/// single block; doubles so averages over iterations stay in the same type.
struct CostBreakdown {
  double tokens = 0;  // per layer, CLS included
  int layers = 0;
  double sa = 0;      // QKV projections and the two attention products
  double ffn = 0;
  double proj = 0;    // attention output projection
  double embed = 0;   // patch embedding of the fed patches
  double head = 0;

  double total() const;
  /// SA and FFN over all layers.
  double blocks() const;
};

/// Cost of a forward pass with `tokens` tokens (CLS included). The FFN
/// term uses the configured hidden width.
CostBreakdown cost_breakdown(Index tokens, const VitConfig& vit);

struct InversionCost {
  CostBreakdown sparse;  // average over iterations
  CostBreakdown dense;
  std::vector<int> tokens;  // per iteration, CLS included
  double reduction() const;         // 1 − sparse/dense, on totals
  double blocks_reduction() const;  // same, SA and FFN only
};

/// Analytic per-iteration cost of an inversion run. A stage at iteration t
/// takes effect from iteration t on.
InversionCost inversion_cost(const StopSchedule& schedule, int total_iters, const VitConfig& vit);

/// ViT-Base/16 on 224×224 RGB with 1000 classes.
VitConfig deit_base_config();

struct ContributionProbe {
  double initial = 0.0;     // classification loss of the shared starting canvas
  double fg_final = 0.0;
  double bg_final = 0.0;
  double delta_fg() const { return initial - fg_final; }
  double delta_bg() const { return initial - bg_final; }
  /// delta_fg / delta_bg; +inf when the background arm made no progress.
  double ratio() const;
};

/// Ranks the patches of a converged dense result by its final attention, then
/// runs two fresh inversions from the same noise: one updating only the
/// top-k patches, one only the bottom-k. Every patch is fed in both arms.
ContributionProbe loss_contribution_probe(const VitModel& model, const InversionResult& dense, int label, Index k,
                                          const InversionConfig& config);

/// Median wall-clock rate of `run` over `repeats` calls; `run` performs
/// `iterations` iterations per call.
double measure_throughput(const std::function<void()>& run, int iterations, int repeats = 5);

/// Iterations/second of sparse inversion under `schedule` (dense if null),
/// after a 10-iteration warm-up, median of `repeats` runs.
double inversion_throughput(const VitModel& model, const InversionConfig& config, const StopSchedule* schedule,
                            int repeats = 5);

/// Per-stage fraction reaching `sparsity` after four equal stages.
double stage_fraction(double sparsity);

struct SweepRow {
  double target_sparsity = 0.0;
  double stage_fraction = 0.0;
  double sparsity = 0.0;  // achieved on the desk grid
  double throughput = 0.0;
  double flops_reduction = 0.0;
  double accuracy = 0.0;  // final transfer accuracy
};

/// For each level, inversion throughput and transfer accuracy under a
/// four-stage schedule scaled to the inversion length (none for level 0).
std::vector<SweepRow> sparsity_sweep(const VitModel& teacher, const VitModel& student, const TransferConfig& config,
                                     const Dataset& validation, const std::vector<double>& levels);

std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace smi
