#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "smi/run.hpp"

using nlohmann::json;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> sets;
  bool print_config = false;
};

int fail(const std::string& code, const std::string& message) {
  std::cerr << json{{"error", code}, {"message", message}}.dump() << "\n";
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse model inversion for vision transformers"};
  app.require_subcommand(1);
  Options opt;
  const std::vector<std::pair<const char*, const char*>> commands = {
      {"train", "Train a teacher on synthetic or IDX data"},
      {"invert", "Invert images from a teacher checkpoint"},
      {"quantize", "Calibrate and evaluate a fake-quantized teacher"},
      {"transfer", "Distill a student from inverted data"},
      {"probe", "Foreground/background loss contribution probe"},
      {"sweep", "Throughput and accuracy across sparsity levels"},
      {"report", "Collect manifest metrics into a CSV"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opt.config, "JSON run configuration");
    sub->add_option("--seed", opt.seed, "Root seed");
    sub->add_option("--out", opt.out, "Output directory");
    sub->add_option("--set", opt.sets, "Override a config value, e.g. --set inversion.lr=0.1")->take_all();
    sub->add_flag("--print-config", opt.print_config, "Print the resolved configuration and exit");
  }
  CLI11_PARSE(app, argc, argv);

  try {
    json doc = opt.config.empty() ? json::object() : smi::read_json(opt.config);
    if (!doc.is_object()) return fail("ConfigError", "config root must be an object");
    doc["command"] = app.get_subcommands().front()->get_name();
    for (const auto& s : opt.sets) smi::apply_override(doc, s);
    if (opt.seed) doc["seed"] = *opt.seed;
    if (!opt.out.empty()) {
      if (!doc.contains("paths")) doc["paths"] = json::object();
      if (!doc["paths"].is_object()) return fail("ConfigError", "paths must be an object");
      doc["paths"]["out"] = opt.out;
    }
    const smi::RunConfig config = smi::RunConfig::from_json(doc);
    if (opt.print_config) {
      std::cout << config.to_json().dump(2) << "\n";
      return 0;
    }
    const json manifest = smi::run(config);
    std::cout << (std::filesystem::path(config.paths.out) / "manifest.json").string() << "\n";
    std::cout << manifest["metrics"].dump() << "\n";
  } catch (const smi::Error& e) {
    return fail(std::string(smi::to_string(e.code())), e.what());
  } catch (const std::exception& e) {
    return fail("InternalError", e.what());
  }
  return 0;
}
