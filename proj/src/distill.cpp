#include "smi/distill.hpp"

#include <chrono>
#include <cmath>

#include "smi/tensor/optim.hpp"
#include "smi/trainer.hpp"

namespace smi {

void TransferConfig::validate(const VitConfig& vit) const {
  if (!(temperature > 0.0)) throw Error(ErrorCode::InvalidArgument, "temperature must be positive");
  if (!(student_lr > 0.0)) throw Error(ErrorCode::InvalidArgument, "student_lr must be positive");
  if (batch_size < 1 || iterations < 0 || eval_every < 1) {
    throw Error(ErrorCode::InvalidArgument, "batch_size and eval_every must be >= 1, iterations >= 0");
  }
  InversionConfig probe = inversion;
  probe.label = 0;
  probe.validate(vit);
  if (schedule) schedule->validate(inversion.total_iters);
}

namespace {

RowMatrix<double> log_softmax_row(const RowMatrix<double>& z, double inv_tau) {
  RowMatrix<double> s = z * inv_tau;
  const double m = s.maxCoeff();
  const double lse = m + std::log((s.array() - m).exp().sum());
  return (s.array() - lse).matrix();
}

}  // namespace

Var<double> kd_loss(const Var<double>& teacher, const Var<double>& student, double temperature) {
  if (teacher.rows() != 1 || student.rows() != 1 || teacher.cols() != student.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "kd_loss needs matching single-row logits");
  }
  const double inv_tau = 1.0 / temperature;
  RowMatrix<double> log_pt = log_softmax_row(teacher.value(), inv_tau);
  RowMatrix<double> log_ps = log_softmax_row(student.value(), inv_tau);
  RowMatrix<double> pt = log_pt.array().exp().matrix();
  RowMatrix<double> diff = log_pt - log_ps;
  const double kl = pt.cwiseProduct(diff).sum();
  RowMatrix<double> y(1, 1);
  y(0, 0) = kl;
  const NodeId it = teacher.id(), is = student.id();
  return teacher.graph().record(
      Shape{}, std::move(y), {it, is},
      [it, is, inv_tau, kl, pt = std::move(pt), log_ps = std::move(log_ps), diff = std::move(diff)](
          Graph<double>& g, const RowMatrix<double>& dy) {
        const double s = dy(0, 0) * inv_tau;
        if (g.requires_grad(is)) g.accumulate(is, (log_ps.array().exp().matrix() - pt) * s);
        if (g.requires_grad(it)) g.accumulate(it, (pt.array() * (diff.array() - kl)).matrix() * s);
      });
}

double kd_loss(const Tensor& teacher, const Tensor& student, double temperature) {
  Graph<double> g;
  g.set_grad_enabled(false);
  const auto [tr, tc] = matrix_extent(teacher.shape());
  const auto [sr, sc] = matrix_extent(student.shape());
  Var<double> t = g.leaf(Shape{1, tr * tc}, Eigen::Map<const RowMatrix<double>>(teacher.data(), 1, tr * tc));
  Var<double> s = g.leaf(Shape{1, sr * sc}, Eigen::Map<const RowMatrix<double>>(student.data(), 1, sr * sc));
  return kd_loss(t, s, temperature).item();
}

VitModel reset_head(const VitModel& model, Rng& rng, double stddev) {
  VitModel out = model;
  out.params.head_w = trunc_normal(out.params.head_w.shape(), rng, stddev);
  out.params.head_b = Tensor(out.params.head_b.shape());
  return out;
}

TransferResult transfer(const VitModel& teacher, VitModel student, const TransferConfig& config,
                        const Dataset& validation) {
  const auto& vc = teacher.config;
  config.validate(vc);
  if (!(student.config == vc)) throw Error(ErrorCode::InvalidArgument, "teacher and student geometry differ");
  const SeedSplitter seeds(config.seed);
  Rng label_rng = seeds.stream("transfer");
  std::uniform_int_distribution<int> label_dist(0, vc.num_classes - 1);
  const bool linear = config.probe_mode == ProbeMode::Linear;
  const StopSchedule* schedule = config.schedule ? &*config.schedule : nullptr;

  TransferResult result;
  TransferReport& rep = result.report;
  rep.batch_size = config.batch_size;
  double sparsity_sum = 0.0;

  for (int step = 0; step < config.iterations; ++step) {
    std::vector<int> labels(static_cast<std::size_t>(config.batch_size));
    for (auto& l : labels) l = label_dist(label_rng);
    InversionConfig inv = config.inversion;
    inv.seed = seeds.seed("inversion", static_cast<std::uint64_t>(step));
    const auto t0 = std::chrono::steady_clock::now();
    const auto batch = invert_batch(teacher, inv, labels, schedule);
    rep.inversion_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    Graph<double> g;
    ModelVars vars;
    vars.layers.resize(student.params.layers.size());
    zip_parameters(student.params, vars, [&](const std::string& name, const Tensor& t, Var<double>& v) {
      v = g.param(t, !linear || is_head_parameter(name));
    });
    Var<double> total;
    for (const auto& r : batch) {
      const auto& retained = r.image.retained;
      const Tensor patches = gather_patches(r.image.canvas, vc.patch_size, retained);
      const Tensor t_logits = predict(teacher, r.image.canvas, retained, {nullptr, false}).logits;
      Var<double> tl = g.leaf(Shape{1, t_logits.numel()}, t_logits.mat());
      Var<double> x = g.leaf(patches);
      Var<double> sl = forward(vc, vars, x, retained, {nullptr, false}).logits;
      Var<double> kl = kd_loss(tl, sl, config.temperature);
      total = total.valid() ? total + kl : kl;
      sparsity_sum += r.image.sparsity();
    }
    Var<double> loss = scale(total, 1.0 / static_cast<double>(batch.size()));
    if (!std::isfinite(loss.item())) throw Error(ErrorCode::DivergenceDetected, "kd loss is not finite");
    rep.loss.push_back(loss.item());
    g.backward(loss);
    std::vector<RowMatrix<double>> grads;
    visit_parameters(vars, [&](const std::string&, const Var<double>& v) { grads.push_back(g.grad(v)); });
    std::size_t k = 0;
    visit_parameters(student.params, [&](const std::string& name, Tensor& t) {
      const std::size_t i = k++;
      if (linear && !is_head_parameter(name)) return;
      sgd_step(t, grads[i], config.student_lr);
    });
    if (!student.all_finite()) throw Error(ErrorCode::DivergenceDetected, "student parameters became non-finite");
    rep.samples += batch.size();
    rep.iterations = step + 1;
    if ((step + 1) % config.eval_every == 0 || step + 1 == config.iterations) {
      rep.eval_steps.push_back(step + 1);
      rep.val_accuracy.push_back(evaluate(student, validation));
    }
  }
  if (rep.samples) rep.mean_sparsity = sparsity_sum / static_cast<double>(rep.samples);
  result.student = std::move(student);
  return result;
}

std::optional<ThresholdHit> iterations_to_accuracy(const TransferReport& report, double threshold) {
  for (std::size_t i = 0; i < report.val_accuracy.size(); ++i) {
    if (report.val_accuracy[i] >= threshold) {
      const int t = i < report.eval_steps.size() ? report.eval_steps[i] : static_cast<int>(i) + 1;
      return ThresholdHit{static_cast<std::size_t>(report.batch_size) * static_cast<std::size_t>(t), t};
    }
  }
  return std::nullopt;
}

}  // namespace smi
