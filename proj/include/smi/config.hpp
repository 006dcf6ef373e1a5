#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "smi/dataset.hpp"
#include "smi/distill.hpp"
#include "smi/inversion.hpp"
#include "smi/trainer.hpp"
#include "smi/vit.hpp"

namespace smi {

enum class Command { Train, Invert, Quantize, Transfer, Probe, Sweep, Report };

std::string to_string(Command c);
/// Throws ConfigError for an unknown name.
Command parse_command(const std::string& name);

struct RunPaths {
  std::string out = "out";
  std::string teacher;   // checkpoint used by invert, quantize, transfer, probe, sweep
  std::string student;   // transfer/sweep backbone; defaults to the teacher
  std::string train_images, train_labels;  // IDX; synthetic data when empty
  std::string val_images, val_labels;
  std::vector<std::string> reports;  // manifests read by the report command
};

struct DataParams {
  SyntheticConfig synthetic;
  std::size_t val_count = 500;
};

enum class CalibrationSource { Sparse, Dense, Gaussian };

struct QuantParams {
  int k_weights = 8;
  int k_acts = 8;
  CalibrationSource calibration = CalibrationSource::Sparse;
  int images = 10;
};

struct ProbeParams {
  Index k = 4;
  std::vector<int> labels = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
};

struct RunConfig {
  Command command = Command::Invert;
  std::uint64_t seed = 0;
  RunPaths paths;
  VitConfig vit;
  DataParams data;
  TrainConfig train;
  InversionConfig inversion;
  std::vector<int> labels = {0};  // images inverted by the invert command
  StopSchedule schedule = StopSchedule::standard();  // empty means dense
  TransferConfig transfer = [] {
    TransferConfig t;
    t.temperature = 4.0;
    t.student_lr = 1.0;
    t.iterations = 40;
    return t;
  }();
  QuantParams quant;
  ProbeParams probe;
  std::vector<double> sweep_levels = {0.0, 0.5, 0.77};

  /// Complete document; every field is present.
  nlohmann::json to_json() const;
  /// Strict parse over the defaults: unknown keys and type errors throw
  /// ConfigError, and the result is validated.
  static RunConfig from_json(const nlohmann::json& j);
  void validate() const;
  /// FNV-1a of the canonical JSON, as 16 hex digits.
  std::string hash() const;
};

/// Applies "a.b.c=value" to a config document. The value is parsed as JSON,
/// falling back to a plain string. Throws ConfigError on a malformed override.
void apply_override(nlohmann::json& doc, const std::string& assignment);

nlohmann::json read_json(const std::string& path);

}  // namespace smi
