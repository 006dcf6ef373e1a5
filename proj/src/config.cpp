#include "smi/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

#include "smi/quant.hpp"

namespace smi {

using nlohmann::json;

namespace {

[[noreturn]] void config_error(const std::string& msg) { throw Error(ErrorCode::ConfigError, msg); }

class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) config_error(where_ + " must be an object");
  }
  void finish() const {
    for (const auto& [key, v] : j_.items()) {
      if (!seen_.count(key)) config_error("unknown key " + path(key));
    }
  }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

  void get(const std::string& key, int& out) {
    if (auto v = find(key)) {
      if (!v->is_number_integer()) config_error(path(key) + " must be an integer");
      const auto x = v->get<std::int64_t>();
      if (x < INT32_MIN || x > INT32_MAX) config_error(path(key) + " is out of range");
      out = static_cast<int>(x);
    }
  }
  void get(const std::string& key, std::int64_t& out) {
    if (auto v = find(key)) {
      if (!v->is_number_integer()) config_error(path(key) + " must be an integer");
      out = v->get<std::int64_t>();
    }
  }
  void get(const std::string& key, std::uint64_t& out) {
    if (auto v = find(key)) {
      if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<std::int64_t>() >= 0))
        config_error(path(key) + " must be a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const std::string& key, double& out) {
    if (auto v = find(key)) {
      if (!v->is_number()) config_error(path(key) + " must be a number");
      out = v->get<double>();
    }
  }
  void get(const std::string& key, bool& out) {
    if (auto v = find(key)) {
      if (!v->is_boolean()) config_error(path(key) + " must be a boolean");
      out = v->get<bool>();
    }
  }
  void get(const std::string& key, std::string& out) {
    if (auto v = find(key)) {
      if (!v->is_string()) config_error(path(key) + " must be a string");
      out = v->get<std::string>();
    }
  }
  template <class T>
  void get(const std::string& key, std::vector<T>& out) {
    if (auto v = find(key)) {
      if (!v->is_array()) config_error(path(key) + " must be an array");
      std::vector<T> items;
      for (std::size_t i = 0; i < v->size(); ++i) {
        json wrap = {{"v", (*v)[i]}};
        Reader r(wrap, path(key) + "[" + std::to_string(i) + "]");
        T item{};
        r.get("v", item);
        items.push_back(item);
      }
      out = std::move(items);
    }
  }
  template <class E>
  void get_enum(const std::string& key, E& out, std::initializer_list<std::pair<const char*, E>> names) {
    std::string s;
    get(key, s);
    if (s.empty()) return;
    for (const auto& [n, e] : names) {
      if (s == n) {
        out = e;
        return;
      }
    }
    config_error(path(key) + ": unknown value \"" + s + "\"");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

template <class F>
void section(Reader& parent, const std::string& key, F&& f) {
  if (const json* v = parent.find(key)) {
    Reader r(*v, parent.path(key));
    f(r);
    r.finish();
  }
}

constexpr std::initializer_list<std::pair<const char*, Command>> kCommands = {
    {"train", Command::Train},       {"invert", Command::Invert}, {"quantize", Command::Quantize},
    {"transfer", Command::Transfer}, {"probe", Command::Probe},   {"sweep", Command::Sweep},
    {"report", Command::Report}};

const char* optimizer_name(Optimizer o) { return o == Optimizer::Adam ? "adam" : "sgd"; }
const char* init_name(InitKind k) { return k == InitKind::Normal ? "normal" : "uniform"; }
const char* probe_name(ProbeMode m) { return m == ProbeMode::Linear ? "linear" : "full"; }
const char* calibration_name(CalibrationSource c) {
  switch (c) {
    case CalibrationSource::Sparse: return "sparse";
    case CalibrationSource::Dense: return "dense";
    case CalibrationSource::Gaussian: return "gaussian";
  }
  return "sparse";
}

StopSchedule parse_schedule(const json& j) {
  if (j.is_string()) {
    if (j == "standard") return StopSchedule::standard();
    if (j == "none") return StopSchedule{};
    config_error("schedule: expected \"standard\", \"none\" or a list of stages");
  }
  if (!j.is_array()) config_error("schedule must be a string or an array");
  StopSchedule s;
  for (std::size_t i = 0; i < j.size(); ++i) {
    Reader r(j[i], "schedule[" + std::to_string(i) + "]");
    StopStage st{0, 0.0};
    if (!r.find("iteration") || !r.find("fraction")) config_error(r.path("") + " needs iteration and fraction");
    r.get("iteration", st.iteration);
    r.get("fraction", st.fraction);
    r.finish();
    s.stages.push_back(st);
  }
  return s;
}

}  // namespace

std::string to_string(Command c) {
  for (const auto& [n, e] : kCommands) {
    if (e == c) return n;
  }
  return "invert";
}

Command parse_command(const std::string& name) {
  for (const auto& [n, e] : kCommands) {
    if (name == n) return e;
  }
  config_error("unknown command \"" + name + "\"");
}

json RunConfig::to_json() const {
  json j;
  j["command"] = to_string(command);
  j["seed"] = seed;
  j["paths"] = {{"out", paths.out},
                {"teacher", paths.teacher},
                {"student", paths.student},
                {"train_images", paths.train_images},
                {"train_labels", paths.train_labels},
                {"val_images", paths.val_images},
                {"val_labels", paths.val_labels},
                {"reports", paths.reports}};
  j["vit"] = {{"image_size", vit.image_size}, {"channels", vit.channels},   {"patch_size", vit.patch_size},
              {"embed_dim", vit.embed_dim},   {"num_heads", vit.num_heads}, {"num_layers", vit.num_layers},
              {"ffn_hidden", vit.ffn_hidden}, {"num_classes", vit.num_classes}};
  const auto& sc = data.synthetic;
  j["data"] = {{"count", sc.count},
               {"val_count", data.val_count},
               {"spurious_rho", sc.spurious_rho},
               {"texture_amplitude", sc.texture_amplitude},
               {"pixel_noise", sc.pixel_noise},
               {"min_glyph", sc.min_glyph},
               {"max_glyph", sc.max_glyph}};
  j["train"] = {{"epochs", train.epochs},
                {"batch_size", train.batch_size},
                {"lr", train.lr},
                {"optimizer", optimizer_name(train.optimizer)},
                {"init_scale", train.init_scale},
                {"hflip", train.hflip},
                {"head_only", train.head_only}};
  j["inversion"] = {{"total_iters", inversion.total_iters}, {"lr", inversion.lr},
                    {"alpha_r", inversion.alpha_r},         {"init", init_name(inversion.init)},
                    {"init_scale", inversion.init_scale},   {"labels", labels}};
  j["schedule"] = json::array();
  for (const auto& st : schedule.stages) j["schedule"].push_back({{"iteration", st.iteration}, {"fraction", st.fraction}});
  j["transfer"] = {{"temperature", transfer.temperature},
                   {"student_lr", transfer.student_lr},
                   {"batch_size", transfer.batch_size},
                   {"iterations", transfer.iterations},
                   {"probe_mode", probe_name(transfer.probe_mode)},
                   {"eval_every", transfer.eval_every}};
  j["quant"] = {{"k_weights", quant.k_weights},
                {"k_acts", quant.k_acts},
                {"calibration", calibration_name(quant.calibration)},
                {"images", quant.images}};
  j["probe"] = {{"k", probe.k}, {"labels", probe.labels}};
  j["sweep"] = {{"levels", sweep_levels}};
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  {
    Reader r(j, "config");
    std::string cmd = to_string(c.command);
    r.get("command", cmd);
    c.command = parse_command(cmd);
    r.get("seed", c.seed);
    section(r, "paths", [&](Reader& p) {
      p.get("out", c.paths.out);
      p.get("teacher", c.paths.teacher);
      p.get("student", c.paths.student);
      p.get("train_images", c.paths.train_images);
      p.get("train_labels", c.paths.train_labels);
      p.get("val_images", c.paths.val_images);
      p.get("val_labels", c.paths.val_labels);
      p.get("reports", c.paths.reports);
    });
    section(r, "vit", [&](Reader& v) {
      v.get("image_size", c.vit.image_size);
      v.get("channels", c.vit.channels);
      v.get("patch_size", c.vit.patch_size);
      v.get("embed_dim", c.vit.embed_dim);
      v.get("num_heads", c.vit.num_heads);
      v.get("num_layers", c.vit.num_layers);
      v.get("ffn_hidden", c.vit.ffn_hidden);
      v.get("num_classes", c.vit.num_classes);
    });
    section(r, "data", [&](Reader& d) {
      auto& sc = c.data.synthetic;
      d.get("count", sc.count);
      d.get("val_count", c.data.val_count);
      d.get("spurious_rho", sc.spurious_rho);
      d.get("texture_amplitude", sc.texture_amplitude);
      d.get("pixel_noise", sc.pixel_noise);
      d.get("min_glyph", sc.min_glyph);
      d.get("max_glyph", sc.max_glyph);
    });
    section(r, "train", [&](Reader& t) {
      t.get("epochs", c.train.epochs);
      t.get("batch_size", c.train.batch_size);
      t.get("lr", c.train.lr);
      t.get_enum("optimizer", c.train.optimizer, {{"adam", Optimizer::Adam}, {"sgd", Optimizer::Sgd}});
      t.get("init_scale", c.train.init_scale);
      t.get("hflip", c.train.hflip);
      t.get("head_only", c.train.head_only);
    });
    section(r, "inversion", [&](Reader& v) {
      v.get("total_iters", c.inversion.total_iters);
      v.get("lr", c.inversion.lr);
      v.get("alpha_r", c.inversion.alpha_r);
      v.get_enum("init", c.inversion.init, {{"normal", InitKind::Normal}, {"uniform", InitKind::Uniform}});
      v.get("init_scale", c.inversion.init_scale);
      v.get("labels", c.labels);
    });
    if (const json* s = r.find("schedule")) c.schedule = parse_schedule(*s);
    section(r, "transfer", [&](Reader& t) {
      t.get("temperature", c.transfer.temperature);
      t.get("student_lr", c.transfer.student_lr);
      t.get("batch_size", c.transfer.batch_size);
      t.get("iterations", c.transfer.iterations);
      t.get_enum("probe_mode", c.transfer.probe_mode, {{"linear", ProbeMode::Linear}, {"full", ProbeMode::Full}});
      t.get("eval_every", c.transfer.eval_every);
    });
    section(r, "quant", [&](Reader& q) {
      q.get("k_weights", c.quant.k_weights);
      q.get("k_acts", c.quant.k_acts);
      q.get_enum("calibration", c.quant.calibration,
                 {{"sparse", CalibrationSource::Sparse},
                  {"dense", CalibrationSource::Dense},
                  {"gaussian", CalibrationSource::Gaussian}});
      q.get("images", c.quant.images);
    });
    section(r, "probe", [&](Reader& p) {
      p.get("k", c.probe.k);
      p.get("labels", c.probe.labels);
    });
    section(r, "sweep", [&](Reader& s) { s.get("levels", c.sweep_levels); });
    r.finish();
  }
  c.validate();
  return c;
}

void RunConfig::validate() const {
  vit.validate();
  train.validate();
  InversionConfig inv = inversion;
  for (int l : labels) {
    inv.label = l;
    inv.validate(vit);
  }
  if (labels.empty()) config_error("inversion.labels must not be empty");
  schedule.validate(inversion.total_iters);
  TransferConfig tc = transfer;
  tc.inversion = inversion;
  tc.validate(vit);
  QuantRange::make(0.0, 1.0, quant.k_weights);
  QuantRange::make(0.0, 1.0, quant.k_acts);
  if (quant.images < 1) config_error("quant.images must be >= 1");
  if (probe.k < 1 || probe.k > vit.num_patches()) config_error("probe.k must be in [1, num_patches]");
  for (int l : probe.labels) {
    if (l < 0 || l >= vit.num_classes) config_error("probe.labels: label out of range");
  }
  for (double s : sweep_levels) {
    if (!(s >= 0.0 && s < 1.0)) config_error("sweep.levels must lie in [0, 1)");
  }
  if (data.synthetic.count == 0 || data.val_count == 0) config_error("data counts must be positive");
  if (paths.out.empty()) config_error("paths.out must not be empty");
}

std::string RunConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json().dump())));
  return buf;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) config_error("override must look like key.path=value: " + assignment);
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) config_error("empty component in override key " + key);
    if (node->is_null()) *node = json::object();
    if (!node->is_object()) config_error("override key " + key + " descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) config_error(path + " is not valid JSON");
  return j;
}

}  // namespace smi
