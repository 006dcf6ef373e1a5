#include "smi/run.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <iomanip>
#include <sstream>

#include "smi/cost.hpp"
#include "smi/io.hpp"
#include "smi/quant.hpp"

namespace smi {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

VitModel require_checkpoint(const std::string& path, const char* what) {
  if (path.empty()) throw Error(ErrorCode::ConfigError, std::string("paths.") + what + " is required");
  return io::load_checkpoint(path);
}

struct Context {
  const RunConfig& cfg;
  SeedSplitter seeds;
  fs::path out;
  json metrics = json::object();
  json outputs = json::array();
  json timing = json::object();

  std::string output(const std::string& name) {
    outputs.push_back(name);
    return (out / name).string();
  }
  InversionConfig inversion(int label, std::uint64_t index) const {
    InversionConfig c = cfg.inversion;
    c.label = label;
    c.seed = seeds.seed("inversion", index);
    return c;
  }
  TransferConfig transfer() const {
    TransferConfig t = cfg.transfer;
    t.inversion = cfg.inversion;
    t.seed = seeds.seed("transfer");
    if (!cfg.schedule.empty()) t.schedule = cfg.schedule;
    return t;
  }
  VitModel student(const VitModel& teacher) const {
    const VitModel backbone = cfg.paths.student.empty() ? teacher : io::load_checkpoint(cfg.paths.student);
    Rng rng = seeds.stream("transfer", 1);
    return reset_head(backbone, rng);
  }
};

void run_train(Context& ctx) {
  const auto [train, val] = load_datasets(ctx.cfg);
  TrainConfig tc = ctx.cfg.train;
  tc.seed = ctx.seeds.root();
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult res;
  if (ctx.cfg.paths.teacher.empty()) {
    res = train_teacher(train, ctx.cfg.vit, tc);
  } else {
    VitModel start = io::load_checkpoint(ctx.cfg.paths.teacher);
    if (tc.head_only) {
      Rng rng = ctx.seeds.stream("init", 1);
      start = reset_head(start, rng);
    }
    res = train_from(std::move(start), train, tc);
  }
  ctx.timing["train_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  io::save_checkpoint(res.model, ctx.output("teacher.smiv"));
  ctx.metrics["train_accuracy"] = res.accuracy;
  ctx.metrics["train_loss"] = res.loss;
  ctx.metrics["val_accuracy"] = evaluate(res.model, val);
}

void run_invert(Context& ctx) {
  const VitModel teacher = require_checkpoint(ctx.cfg.paths.teacher, "teacher");
  const Normalization norm = synthetic_normalization();
  std::ostringstream csv;
  csv << std::setprecision(12);
  csv << "image,label,iteration,loss,cls_loss,tokens\n";
  json images = json::array();
  double seconds = 0.0;
  const auto& labels = ctx.cfg.labels;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const InversionConfig ic = ctx.inversion(labels[i], i);
    const InversionResult res = invert(teacher, ic, &ctx.cfg.schedule);
    seconds += res.trace.total_seconds;
    const std::string ext = teacher.config.channels == 1 ? ".pgm" : ".ppm";
    io::write_image(res.image, norm, ctx.output("invert_" + std::to_string(i) + "_y" + std::to_string(labels[i]) + ext));
    for (std::size_t t = 0; t < res.trace.loss.size(); ++t) {
      csv << i << ',' << labels[i] << ',' << t << ',' << res.trace.loss[t] << ',' << res.trace.cls_loss[t] << ','
          << res.trace.tokens[t] << '\n';
    }
    std::int64_t macs = 0;
    for (const auto& m : res.trace.macs) macs += m.total();
    images.push_back({{"label", labels[i]},
                      {"final_loss", res.trace.loss.back()},
                      {"final_cls_loss", res.trace.cls_loss.back()},
                      {"sparsity", res.image.sparsity()},
                      {"retained", res.image.retained},
                      {"macs", macs}});
  }
  io::write_text(ctx.output("invert_trace.csv"), csv.str());
  const InversionCost cost = inversion_cost(ctx.cfg.schedule, ctx.cfg.inversion.total_iters, teacher.config);
  ctx.metrics["images"] = images;
  ctx.metrics["retained_counts"] = retained_counts(ctx.cfg.schedule, teacher.config.num_patches());
  ctx.metrics["flops_per_iteration"] = {{"sparse", cost.sparse.total()}, {"dense", cost.dense.total()}};
  ctx.metrics["flops_reduction"] = cost.reduction();
  ctx.timing["inversion_seconds"] = seconds;
}

void run_quantize(Context& ctx) {
  const VitModel teacher = require_checkpoint(ctx.cfg.paths.teacher, "teacher");
  const auto [train, val] = load_datasets(ctx.cfg);
  (void)train;
  const auto& q = ctx.cfg.quant;
  std::vector<SparseImage> cal;
  if (q.calibration == CalibrationSource::Gaussian) {
    Rng rng = ctx.seeds.stream("inversion");
    cal = gaussian_calibration_set(teacher.config, static_cast<std::size_t>(q.images), rng);
  } else {
    const StopSchedule* sched = q.calibration == CalibrationSource::Sparse ? &ctx.cfg.schedule : nullptr;
    for (int i = 0; i < q.images; ++i) {
      const InversionConfig ic = ctx.inversion(i % teacher.config.num_classes, static_cast<std::uint64_t>(i));
      cal.push_back(invert(teacher, ic, sched).image);
    }
  }
  const QuantPlan plan = make_plan(teacher, cal, q.k_weights, q.k_acts);
  io::write_text(ctx.output("quant_plan.json"), plan.to_json().dump(2) + "\n");
  ctx.metrics["fp_accuracy"] = evaluate(teacher, val);
  ctx.metrics["quant_accuracy"] = evaluate_quantized(teacher, plan, val);
}

void run_transfer(Context& ctx) {
  const VitModel teacher = require_checkpoint(ctx.cfg.paths.teacher, "teacher");
  const auto [train, val] = load_datasets(ctx.cfg);
  (void)train;
  const TransferResult res = transfer(teacher, ctx.student(teacher), ctx.transfer(), val);
  io::save_checkpoint(res.student, ctx.output("student.smiv"));
  std::ostringstream csv;
  csv << "iteration,samples,val_accuracy\n";
  for (std::size_t i = 0; i < res.report.eval_steps.size(); ++i) {
    const int step = res.report.eval_steps[i];
    csv << step << ',' << static_cast<std::size_t>(step) * static_cast<std::size_t>(res.report.batch_size) << ','
        << res.report.val_accuracy[i] << '\n';
  }
  io::write_text(ctx.output("transfer.csv"), csv.str());
  const double best = res.report.val_accuracy.empty()
                          ? 0.0
                          : *std::max_element(res.report.val_accuracy.begin(), res.report.val_accuracy.end());
  ctx.metrics["teacher_accuracy"] = evaluate(teacher, val);
  ctx.metrics["final_accuracy"] = res.report.val_accuracy.empty() ? 0.0 : res.report.val_accuracy.back();
  ctx.metrics["best_accuracy"] = best;
  if (const auto hit = iterations_to_accuracy(res.report, best)) ctx.metrics["iterations_to_best"] = hit->iterations;
  ctx.metrics["kd_loss"] = res.report.loss;
  ctx.metrics["samples"] = res.report.samples;
  ctx.metrics["mean_sparsity"] = res.report.mean_sparsity;
  ctx.timing["inversion_seconds"] = res.report.inversion_seconds;
}

void run_probe(Context& ctx) {
  const VitModel teacher = require_checkpoint(ctx.cfg.paths.teacher, "teacher");
  std::ostringstream csv;
  csv << "label,initial,fg_final,bg_final,ratio\n";
  std::vector<double> ratios;
  const auto& labels = ctx.cfg.probe.labels;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const InversionConfig ic = ctx.inversion(labels[i], i);
    const InversionResult dense = invert_dense(teacher, ic);
    const ContributionProbe p = loss_contribution_probe(teacher, dense, labels[i], ctx.cfg.probe.k, ic);
    csv << labels[i] << ',' << p.initial << ',' << p.fg_final << ',' << p.bg_final << ',' << p.ratio() << '\n';
    ratios.push_back(p.ratio());
  }
  io::write_text(ctx.output("probe.csv"), csv.str());
  const double m = median(ratios);
  ctx.metrics["median_ratio"] = std::isfinite(m) ? json(m) : json("inf");
}

void run_sweep(Context& ctx) {
  const VitModel teacher = require_checkpoint(ctx.cfg.paths.teacher, "teacher");
  const auto [train, val] = load_datasets(ctx.cfg);
  (void)train;
  const auto rows = sparsity_sweep(teacher, ctx.student(teacher), ctx.transfer(), val, ctx.cfg.sweep_levels);
  io::write_text(ctx.output("sweep.csv"), sweep_csv(rows));
  json levels = json::array(), rates = json::array();
  for (const auto& r : rows) {
    levels.push_back({{"target_sparsity", r.target_sparsity},
                      {"sparsity", r.sparsity},
                      {"flops_reduction", r.flops_reduction},
                      {"accuracy", r.accuracy}});
    rates.push_back(r.throughput);
  }
  ctx.metrics["levels"] = levels;
  ctx.timing["throughput_its"] = rates;
}

void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, std::string>>& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
  } else if (j.is_array()) {
    for (std::size_t i = 0; i < j.size(); ++i) flatten(j[i], prefix + "." + std::to_string(i), out);
  } else {
    out.emplace_back(prefix, j.is_string() ? j.get<std::string>() : j.dump());
  }
}

void run_report(Context& ctx) {
  if (ctx.cfg.paths.reports.empty()) throw Error(ErrorCode::ConfigError, "paths.reports lists no manifests");
  std::ostringstream csv;
  csv << "manifest,command,config_hash,seed,metric,value\n";
  std::size_t rows = 0;
  for (const auto& path : ctx.cfg.paths.reports) {
    const json m = read_json(path);
    if (!m.contains("command") || !m.contains("metrics")) throw Error(ErrorCode::ConfigError, path + " is not a manifest");
    std::vector<std::pair<std::string, std::string>> flat;
    flatten(m["metrics"], "", flat);
    for (const auto& [k, v] : flat) {
      csv << path << ',' << m["command"].get<std::string>() << ',' << m["config_hash"].get<std::string>() << ','
          << m["seed"].dump() << ',' << k << ',' << v << '\n';
      ++rows;
    }
  }
  io::write_text(ctx.output("report.csv"), csv.str());
  ctx.metrics["manifests"] = ctx.cfg.paths.reports.size();
  ctx.metrics["rows"] = rows;
}

}  // namespace

std::pair<Dataset, Dataset> load_datasets(const RunConfig& config) {
  const auto& p = config.paths;
  const SeedSplitter seeds(config.seed);
  SyntheticConfig sc = config.data.synthetic;
  sc.image_size = config.vit.image_size;
  sc.num_classes = config.vit.num_classes;
  Dataset train, val;
  if (!p.train_images.empty()) {
    train = io::load_idx(p.train_images, p.train_labels, config.vit.num_classes);
  } else {
    Rng rng = seeds.stream("data", 0);
    train = make_synthetic(sc, rng);
  }
  if (!p.val_images.empty()) {
    val = io::load_idx(p.val_images, p.val_labels, config.vit.num_classes);
  } else {
    sc.count = config.data.val_count;
    Rng rng = seeds.stream("data", 1);
    val = make_synthetic(sc, rng);
  }
  normalize_in_place(train, synthetic_normalization());
  normalize_in_place(val, synthetic_normalization());
  return {std::move(train), std::move(val)};
}

json run(const RunConfig& config) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  Context ctx{config, SeedSplitter(config.seed), fs::path(config.paths.out)};
  std::error_code ec;
  fs::create_directories(ctx.out, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + ctx.out.string() + ": " + ec.message());

  switch (config.command) {
    case Command::Train: run_train(ctx); break;
    case Command::Invert: run_invert(ctx); break;
    case Command::Quantize: run_quantize(ctx); break;
    case Command::Transfer: run_transfer(ctx); break;
    case Command::Probe: run_probe(ctx); break;
    case Command::Sweep: run_sweep(ctx); break;
    case Command::Report: run_report(ctx); break;
  }
  ctx.timing["total_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  json m;
  m["command"] = to_string(config.command);
  m["config_hash"] = config.hash();
  m["seed"] = config.seed;
  m["config"] = config.to_json();
  m["metrics"] = ctx.metrics;
  m["outputs"] = ctx.outputs;
  m["timestamp"] = utc_timestamp();
  m["timing"] = ctx.timing;
  io::write_text((ctx.out / "manifest.json").string(), m.dump(2) + "\n");
  return m;
}

json deterministic_part(json manifest) {
  manifest.erase("timestamp");
  manifest.erase("timing");
  return manifest;
}

}  // namespace smi
