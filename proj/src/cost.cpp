#include "smi/cost.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>

namespace smi {

std::int64_t flops_sa(std::int64_t tokens, std::int64_t dim) {
  return 3 * tokens * dim * dim + 2 * tokens * tokens * dim;
}

std::int64_t flops_ffn(std::int64_t tokens, std::int64_t dim) { return 8 * tokens * dim * dim; }

double CostBreakdown::blocks() const { return layers * (sa + ffn); }

double CostBreakdown::total() const { return layers * (sa + ffn + proj) + embed + head; }

CostBreakdown cost_breakdown(Index tokens, const VitConfig& vit) {
  const auto l = static_cast<std::int64_t>(tokens);
  const std::int64_t d = vit.embed_dim;
  CostBreakdown c;
  c.tokens = static_cast<double>(l);
  c.layers = vit.num_layers;
  c.sa = static_cast<double>(flops_sa(l, d));
  c.ffn = static_cast<double>(2 * l * d * vit.ffn_hidden);
  c.proj = static_cast<double>(l * d * d);
  c.embed = static_cast<double>((l - 1) * vit.patch_dim() * d);
  c.head = static_cast<double>(d * vit.num_classes);
  return c;
}

double InversionCost::reduction() const { return 1.0 - sparse.total() / dense.total(); }

double InversionCost::blocks_reduction() const { return 1.0 - sparse.blocks() / dense.blocks(); }

InversionCost inversion_cost(const StopSchedule& schedule, int total_iters, const VitConfig& vit) {
  vit.validate();
  schedule.validate(total_iters);
  const Index L = vit.num_patches();
  InversionCost out;
  out.dense = cost_breakdown(L + 1, vit);
  out.sparse.layers = vit.num_layers;
  Index n = L;
  std::size_t next = 0;
  for (int it = 0; it < total_iters; ++it) {
    if (next < schedule.stages.size() && schedule.stages[next].iteration == it) {
      n -= stop_count(n, schedule.stages[next].fraction);
      ++next;
    }
    out.tokens.push_back(static_cast<int>(n + 1));
    const CostBreakdown c = cost_breakdown(n + 1, vit);
    out.sparse.tokens += c.tokens;
    out.sparse.sa += c.sa;
    out.sparse.ffn += c.ffn;
    out.sparse.proj += c.proj;
    out.sparse.embed += c.embed;
    out.sparse.head += c.head;
  }
  const double t = total_iters;
  for (double* f : {&out.sparse.tokens, &out.sparse.sa, &out.sparse.ffn, &out.sparse.proj, &out.sparse.embed,
                    &out.sparse.head}) {
    *f /= t;
  }
  return out;
}

VitConfig deit_base_config() {
  VitConfig c;
  c.image_size = 224;
  c.channels = 3;
  c.patch_size = 16;
  c.embed_dim = 768;
  c.num_heads = 12;
  c.num_layers = 12;
  c.ffn_hidden = 3072;
  c.num_classes = 1000;
  return c;
}

double ContributionProbe::ratio() const {
  const double bg = delta_bg();
  if (bg <= 0.0) return std::numeric_limits<double>::infinity();
  return delta_fg() / bg;
}

namespace {

double final_cls_loss(const VitModel& model, const Tensor& canvas, int label) {
  const auto z = predict(model, canvas, {nullptr, false}).logits.mat();
  const double m = z.maxCoeff();
  return m + std::log((z.array() - m).exp().sum()) - z(0, label);
}

}  // namespace

ContributionProbe loss_contribution_probe(const VitModel& model, const InversionResult& dense, int label, Index k,
                                          const InversionConfig& config) {
  const auto ranking = identify_semantic_patches(dense.attention, dense.image.retained);
  const auto n = static_cast<Index>(ranking.size());
  if (k < 1 || k > n) throw Error(ErrorCode::InvalidArgument, "probe k must be in [1, retained]");
  InversionConfig c = config;
  c.label = label;
  const Tensor init = initial_canvas(model.config, c);

  ContributionProbe out;
  out.initial = final_cls_loss(model, init, label);
  auto arm = [&](std::vector<Index> patches) {
    InversionHooks hooks;
    hooks.init = init;
    hooks.trainable = std::move(patches);
    return final_cls_loss(model, invert(model, c, nullptr, hooks).image.canvas, label);
  };
  out.fg_final = arm({ranking.begin(), ranking.begin() + k});
  out.bg_final = arm({ranking.end() - k, ranking.end()});
  return out;
}

double measure_throughput(const std::function<void()>& run, int iterations, int repeats) {
  if (repeats < 1 || iterations < 1) throw Error(ErrorCode::InvalidArgument, "repeats and iterations must be >= 1");
  std::vector<double> seconds;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    run();
    seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(seconds.begin(), seconds.end());
  const std::size_t m = seconds.size() / 2;
  const double median = seconds.size() % 2 ? seconds[m] : 0.5 * (seconds[m - 1] + seconds[m]);
  return iterations / median;
}

double inversion_throughput(const VitModel& model, const InversionConfig& config, const StopSchedule* schedule,
                            int repeats) {
  InversionConfig warm = config;
  warm.total_iters = 10;
  invert(model, warm);
  return measure_throughput([&] { invert(model, config, schedule); }, config.total_iters, repeats);
}

double stage_fraction(double sparsity) {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) throw Error(ErrorCode::InvalidArgument, "sparsity must be in [0, 1)");
  return 1.0 - std::pow(1.0 - sparsity, 0.25);
}

std::vector<SweepRow> sparsity_sweep(const VitModel& teacher, const VitModel& student, const TransferConfig& config,
                                     const Dataset& validation, const std::vector<double>& levels) {
  std::vector<SweepRow> rows;
  const int total = config.inversion.total_iters;
  for (double level : levels) {
    SweepRow r;
    r.target_sparsity = level;
    r.stage_fraction = stage_fraction(level);
    TransferConfig tc = config;
    if (level > 0.0) {
      tc.schedule = StopSchedule::four_stage(r.stage_fraction, total);
    } else {
      tc.schedule.reset();
    }
    const StopSchedule none;
    const StopSchedule& sched = tc.schedule ? *tc.schedule : none;
    const Index L = teacher.config.num_patches();
    const auto counts = retained_counts(sched, L);
    r.sparsity = counts.empty() ? 0.0 : 1.0 - static_cast<double>(counts.back()) / static_cast<double>(L);
    r.flops_reduction = inversion_cost(sched, total, teacher.config).reduction();
    InversionConfig ic = config.inversion;
    ic.seed = config.seed;
    r.throughput = inversion_throughput(teacher, ic, tc.schedule ? &*tc.schedule : nullptr);
    const auto res = transfer(teacher, student, tc, validation);
    r.accuracy = res.report.val_accuracy.empty() ? 0.0 : res.report.val_accuracy.back();
    rows.push_back(r);
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "target_sparsity,stage_fraction,sparsity,throughput_its,flops_reduction,accuracy\n";
  for (const auto& r : rows) {
    os << r.target_sparsity << ',' << r.stage_fraction << ',' << r.sparsity << ',' << r.throughput << ','
       << r.flops_reduction << ',' << r.accuracy << '\n';
  }
  return os.str();
}

}  // namespace smi
