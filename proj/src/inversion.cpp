#include "smi/inversion.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "smi/tensor/optim.hpp"

namespace smi {

StopSchedule StopSchedule::standard() { return four_stage(0.3); }

StopSchedule StopSchedule::four_stage(double fraction, int total_iters) {
  StopSchedule s;
  for (int at : {50, 100, 200, 300}) {
    const int it = static_cast<int>(std::lround(static_cast<double>(at) * total_iters / 400.0));
    s.stages.push_back({std::max(it, 1), fraction});
  }
  return s;
}

void StopSchedule::validate(int total_iters) const {
  int prev = 0;
  for (const auto& s : stages) {
    if (s.iteration < 1 || s.iteration <= prev || s.iteration >= total_iters) {
      throw Error(ErrorCode::ScheduleOutOfRange, "stage at iteration " + std::to_string(s.iteration) +
                                                     " outside [1, " + std::to_string(total_iters) +
                                                     ") or not increasing");
    }
    if (!(s.fraction > 0.0 && s.fraction < 1.0)) {
      throw Error(ErrorCode::ScheduleOutOfRange, "stop fraction must lie in (0,1)");
    }
    prev = s.iteration;
  }
}

Index SparseImage::num_patches() const {
  return (canvas.dim(0) / patch_size) * (canvas.dim(1) / patch_size);
}

std::vector<Index> SparseImage::stopped() const {
  std::vector<Index> out;
  for (const auto& e : history) out.insert(out.end(), e.stopped.begin(), e.stopped.end());
  std::sort(out.begin(), out.end());
  return out;
}

bool SparseImage::is_stopped(Index patch) const {
  return !std::binary_search(retained.begin(), retained.end(), patch);
}

double SparseImage::sparsity() const {
  return 1.0 - static_cast<double>(retained.size()) / static_cast<double>(num_patches());
}

Tensor SparseImage::masked(double fill) const {
  Tensor out = canvas;
  const Index c = canvas.dim(2), w = canvas.dim(1);
  const Index gw = w / patch_size;
  for (Index p : stopped()) {
    const Index r0 = (p / gw) * patch_size, c0 = (p % gw) * patch_size;
    for (Index r = r0; r < r0 + patch_size; ++r)
      for (Index x = c0; x < c0 + patch_size; ++x)
        for (Index k = 0; k < c; ++k) out[(r * w + x) * c + k] = fill;
  }
  return out;
}

void SparseImage::check_invariants() const {
  const Index n = num_patches();
  std::vector<int> seen(static_cast<std::size_t>(n), 0);
  auto mark = [&](Index p) {
    if (p < 0 || p >= n || seen[static_cast<std::size_t>(p)]++) {
      throw Error(ErrorCode::InvalidArgument, "patch " + std::to_string(p) + " repeated or out of range");
    }
  };
  for (Index p : retained) mark(p);
  for (const auto& e : history)
    for (Index p : e.stopped) mark(p);
  if (retained.empty()) throw Error(ErrorCode::InvalidArgument, "no retained patch");
  for (int s : seen)
    if (s != 1) throw Error(ErrorCode::InvalidArgument, "patches not partitioned");
}

void InversionConfig::validate(const VitConfig& vit) const {
  if (total_iters < 0) throw Error(ErrorCode::InvalidArgument, "total_iters must be >= 0");
  if (!(lr > 0.0)) throw Error(ErrorCode::InvalidArgument, "inversion lr must be positive");
  if (!(alpha_r >= 0.0)) throw Error(ErrorCode::InvalidArgument, "alpha_r must be >= 0");
  if (label < 0 || label >= vit.num_classes) {
    throw Error(ErrorCode::LabelOutOfRange, "target label " + std::to_string(label));
  }
}

Tensor initial_canvas(const VitConfig& vit, const InversionConfig& config) {
  Rng rng(config.seed);
  const Shape shape{vit.image_size, vit.image_size, vit.channels};
  if (config.init == InitKind::Normal) return randn(shape, rng, config.init_scale);
  Tensor t(shape);
  std::uniform_real_distribution<double> u(-config.init_scale, config.init_scale);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

// ---------------------------------------------------------------------------

namespace {

struct TvPairs {
  std::vector<Index> a, b;  // flat offsets of the first channel in the patch matrix
  Index channels;
};

TvPairs tv_pairs(std::span<const Index> patches, int image_h, int image_w, int channels, int patch_size) {
  const Index gw = image_w / patch_size;
  const Index pd = static_cast<Index>(patch_size) * patch_size * channels;
  std::vector<Index> row_of(static_cast<std::size_t>((image_h / patch_size) * gw), -1);
  for (std::size_t i = 0; i < patches.size(); ++i) row_of[static_cast<std::size_t>(patches[i])] = static_cast<Index>(i);
  auto offset = [&](Index r, Index c) -> Index {
    const Index row = row_of[static_cast<std::size_t>((r / patch_size) * gw + c / patch_size)];
    if (row < 0) return -1;
    return row * pd + ((r % patch_size) * patch_size + c % patch_size) * channels;
  };
  TvPairs out{{}, {}, channels};
  constexpr int dirs[4][2] = {{1, 0}, {0, 1}, {1, 1}, {1, -1}};
  for (const auto& d : dirs) {
    for (Index r = 0; r < image_h; ++r) {
      for (Index c = 0; c < image_w; ++c) {
        const Index r2 = r + d[0], c2 = c + d[1];
        if (r2 < 0 || r2 >= image_h || c2 < 0 || c2 >= image_w) continue;
        const Index oa = offset(r, c), ob = offset(r2, c2);
        if (oa < 0 || ob < 0) continue;
        out.a.push_back(oa);
        out.b.push_back(ob);
      }
    }
  }
  return out;
}

Var<double> tv_op(const Var<double>& x, TvPairs pairs) {
  const double* xd = x.value().data();
  const Index ch = pairs.channels;
  double total = 0.0;
  for (std::size_t i = 0; i < pairs.a.size(); ++i) {
    double s = 0.0;
    for (Index k = 0; k < ch; ++k) {
      const double d = xd[pairs.a[i] + k] - xd[pairs.b[i] + k];
      s += d * d;
    }
    total += std::sqrt(s);
  }
  RowMatrix<double> y(1, 1);
  y(0, 0) = total;
  const NodeId ix = x.id();
  return x.graph().record(Shape{}, std::move(y), {ix},
                          [ix, pairs = std::move(pairs)](Graph<double>& g, const RowMatrix<double>& dy) {
                            const auto& xv = g.value(ix);
                            const double* p = xv.data();
                            RowMatrix<double> dx = RowMatrix<double>::Zero(xv.rows(), xv.cols());
                            double* q = dx.data();
                            const Index c = pairs.channels;
                            for (std::size_t i = 0; i < pairs.a.size(); ++i) {
                              double s = 0.0;
                              for (Index k = 0; k < c; ++k) {
                                const double d = p[pairs.a[i] + k] - p[pairs.b[i] + k];
                                s += d * d;
                              }
                              if (s == 0.0) continue;  // subgradient 0 at a zero difference
                              const double inv = dy(0, 0) / std::sqrt(s);
                              for (Index k = 0; k < c; ++k) {
                                const double d = (p[pairs.a[i] + k] - p[pairs.b[i] + k]) * inv;
                                q[pairs.a[i] + k] += d;
                                q[pairs.b[i] + k] -= d;
                              }
                            }
                            g.accumulate(ix, dx);
                          });
}

}  // namespace

Var<double> tv_regularizer(const Var<double>& x, std::span<const Index> patches, const VitConfig& vit) {
  if (x.rows() != static_cast<Index>(patches.size()) || x.cols() != vit.patch_dim()) {
    throw Error(ErrorCode::ShapeMismatch, "tv_regularizer: patch matrix does not match the patch set");
  }
  return tv_op(x, tv_pairs(patches, vit.image_size, vit.image_size, vit.channels, vit.patch_size));
}

double tv_regularizer(const Tensor& image, std::span<const Index> patches, int patch_size) {
  Graph<double> g;
  g.set_grad_enabled(false);
  Var<double> x = g.leaf(gather_patches(image, patch_size, patches));
  const auto h = static_cast<int>(image.dim(0)), w = static_cast<int>(image.dim(1));
  const auto c = static_cast<int>(image.dim(2));
  return tv_op(x, tv_pairs(patches, h, w, c, patch_size)).item();
}

std::vector<Index> identify_semantic_patches(const Tensor& a_cls, std::span<const Index> retained) {
  if (a_cls.numel() != static_cast<Index>(retained.size())) {
    throw Error(ErrorCode::StaleAttention, "attention over " + std::to_string(a_cls.numel()) + " tokens, " +
                                               std::to_string(retained.size()) + " retained");
  }
  std::vector<std::size_t> order(retained.size());
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    const double ai = a_cls[static_cast<Index>(i)], aj = a_cls[static_cast<Index>(j)];
    if (ai != aj) return ai > aj;
    return retained[i] < retained[j];
  });
  std::vector<Index> ranking(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) ranking[i] = retained[order[i]];
  return ranking;
}

Index stop_count(Index retained, double fraction) {
  const auto n = static_cast<Index>(std::ceil(static_cast<double>(retained) * fraction - 1e-9));
  return std::clamp<Index>(n, 0, std::max<Index>(retained - 1, 0));
}

void apply_stop_stage(SparseImage& image, std::span<const Index> ranking, double fraction, int iteration) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw Error(ErrorCode::ScheduleOutOfRange, "stop fraction outside (0,1)");
  if (ranking.size() != image.retained.size()) {
    throw Error(ErrorCode::StaleAttention, "ranking does not cover the retained set");
  }
  const Index n = stop_count(static_cast<Index>(ranking.size()), fraction);
  const std::size_t keep = ranking.size() - static_cast<std::size_t>(n);
  StopEvent ev{iteration, std::vector<Index>(ranking.begin() + static_cast<std::ptrdiff_t>(keep), ranking.end())};
  std::vector<Index> kept(ranking.begin(), ranking.begin() + static_cast<std::ptrdiff_t>(keep));
  std::sort(kept.begin(), kept.end());
  image.retained = std::move(kept);
  image.history.push_back(std::move(ev));
}

std::vector<Index> retained_counts(const StopSchedule& schedule, Index patches) {
  std::vector<Index> out;
  Index n = patches;
  for (const auto& s : schedule.stages) {
    n -= stop_count(n, s.fraction);
    out.push_back(n);
  }
  return out;
}

InversionLoss inversion_loss(const VitConfig& vit, const ModelVars& vars, const Var<double>& x,
                             std::span<const Index> patches, int label, double alpha_r) {
  InversionLoss out;
  out.forward = forward(vit, vars, x, patches, {nullptr, false});
  out.cls = cross_entropy(out.forward.logits, label);
  out.total = out.cls;
  if (alpha_r > 0.0) out.total = out.cls + scale(tv_regularizer(x, patches, vit), alpha_r);
  return out;
}

double inversion_loss(const VitModel& model, const SparseImage& image, int label, double alpha_r) {
  Graph<double> g;
  g.set_grad_enabled(false);
  const ModelVars vars = bind_parameters(model, g, false);
  Var<double> x = g.leaf(gather_patches(image.canvas, model.config.patch_size, image.retained));
  return inversion_loss(model.config, vars, x, image.retained, label, alpha_r).total.item();
}

// ---------------------------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

struct StepOutput {
  double loss, cls_loss;
  RowMatrix<double> grad;
  Tensor attention;
  MacCounter macs;
};

// One forward/backward of the inversion objective over the patch rows `x`.
StepOutput inversion_step(const VitModel& model, RowMatrix<double> x,
                          std::span<const Index> patches, const InversionConfig& config) {
  Graph<double> g;
  const auto& vc = model.config;
  ModelVars vars = bind_parameters(model, g, false);
  Var<double> xv = g.leaf(Shape{x.rows(), x.cols()}, std::move(x), true);
  InversionLoss l = inversion_loss(vc, vars, xv, patches, config.label, config.alpha_r);
  g.backward(l.total);
  return {l.total.item(), l.cls.item(), g.grad(xv), cls_attention(l.forward.record), g.macs()};
}

void record(InversionTrace& trace, const StepOutput& s, Index tokens, Clock::time_point start) {
  trace.loss.push_back(s.loss);
  trace.cls_loss.push_back(s.cls_loss);
  trace.tokens.push_back(static_cast<int>(tokens));
  trace.macs.push_back(s.macs);
  const double dt = std::chrono::duration<double>(Clock::now() - start).count();
  trace.seconds.push_back(dt);
  trace.total_seconds += dt;
}

Tensor checked_init(const VitModel& model, const InversionConfig& config, const std::optional<Tensor>& init) {
  const auto& vc = model.config;
  if (!init) return initial_canvas(vc, config);
  if (init->shape() != Shape{vc.image_size, vc.image_size, vc.channels}) {
    throw Error(ErrorCode::ShapeMismatch, "initial canvas " + shape_string(init->shape()));
  }
  return *init;
}

}  // namespace

InversionResult invert(const VitModel& model, const InversionConfig& config, const StopSchedule* schedule,
                       const InversionHooks& hooks) {
  const auto& vc = model.config;
  config.validate(vc);
  if (schedule) schedule->validate(config.total_iters);
  const int P = vc.patch_size;
  const Index L = vc.num_patches();

  InversionResult result;
  SparseImage& img = result.image;
  img.canvas = checked_init(model, config, hooks.init);
  img.patch_size = P;
  img.retained = all_patches(vc);

  std::vector<char> trainable(static_cast<std::size_t>(L), 1);
  if (hooks.trainable) {
    std::fill(trainable.begin(), trainable.end(), 0);
    for (Index p : *hooks.trainable) {
      if (p < 0 || p >= L) throw Error(ErrorCode::InvalidArgument, "trainable patch out of range");
      trainable[static_cast<std::size_t>(p)] = 1;
    }
  }

  RowMatrix<double> X = patchify(img.canvas, P).mat();
  RowMatrix<double> m = RowMatrix<double>::Zero(X.rows(), X.cols());
  RowMatrix<double> v = RowMatrix<double>::Zero(X.rows(), X.cols());
  const AdamOptions adam{config.lr};
  std::size_t next_stage = 0;
  Tensor attention;

  for (int it = 0; it < config.total_iters; ++it) {
    const auto start = Clock::now();
    if (schedule && next_stage < schedule->stages.size() && schedule->stages[next_stage].iteration == it) {
      const auto ranking = identify_semantic_patches(attention, img.retained);
      apply_stop_stage(img, ranking, schedule->stages[next_stage].fraction, it);
      for (Index p : img.history.back().stopped) {
        m.row(p).setZero();
        v.row(p).setZero();
      }
      ++next_stage;
    }
    const auto n = static_cast<Index>(img.retained.size());
    RowMatrix<double> xr(n, X.cols());
    for (Index i = 0; i < n; ++i) xr.row(i) = X.row(img.retained[static_cast<std::size_t>(i)]);

    StepOutput s = inversion_step(model, std::move(xr), img.retained, config);
    for (Index i = 0; i < n; ++i) {
      const Index p = img.retained[static_cast<std::size_t>(i)];
      if (!trainable[static_cast<std::size_t>(p)]) continue;
      auto xp = X.row(p);
      auto mp = m.row(p);
      auto vp = v.row(p);
      adam_update(xp, s.grad.row(i), mp, vp, it + 1, adam);
    }
    attention = std::move(s.attention);
    record(result.trace, s, n + 1, start);
    if (hooks.on_iteration) {
      img.canvas = unpatchify(Tensor(Shape{L, X.cols()}, X), vc.image_size, vc.image_size, vc.channels, P);
      hooks.on_iteration(it, img);
    }
  }
  img.canvas = unpatchify(Tensor(Shape{L, X.cols()}, X), vc.image_size, vc.image_size, vc.channels, P);
  result.attention = std::move(attention);
  return result;
}

InversionResult invert_dense(const VitModel& model, const InversionConfig& config) {
  const auto& vc = model.config;
  config.validate(vc);
  const int P = vc.patch_size;
  const auto all = all_patches(vc);

  InversionResult result;
  result.image.patch_size = P;
  result.image.retained = all;
  RowMatrix<double> X = patchify(initial_canvas(vc, config), P).mat();
  RowMatrix<double> m = RowMatrix<double>::Zero(X.rows(), X.cols());
  RowMatrix<double> v = RowMatrix<double>::Zero(X.rows(), X.cols());
  const AdamOptions adam{config.lr};
  for (int it = 0; it < config.total_iters; ++it) {
    const auto start = Clock::now();
    StepOutput s = inversion_step(model, X, all, config);
    adam_update(X, s.grad, m, v, it + 1, adam);
    result.attention = std::move(s.attention);
    record(result.trace, s, static_cast<Index>(all.size()) + 1, start);
  }
  result.image.canvas =
      unpatchify(Tensor(Shape{X.rows(), X.cols()}, X), vc.image_size, vc.image_size, vc.channels, P);
  return result;
}

std::vector<InversionResult> invert_batch(const VitModel& model, const InversionConfig& config,
                                          std::span<const int> labels, const StopSchedule* schedule) {
  const SeedSplitter seeds(config.seed);
  std::vector<InversionResult> out;
  out.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    InversionConfig c = config;
    c.label = labels[i];
    c.seed = seeds.seed("inversion", i);
    out.push_back(invert(model, c, schedule));
  }
  return out;
}

}  // namespace smi
