#pragma once

#include <filesystem>

#include <json.hpp>

#include "smi/config.hpp"

namespace smi {

/// Executes one command and writes its artifacts plus `manifest.json` under
/// config.paths.out. Returns the manifest: command, config_hash, seed,
/// config, metrics, outputs, timestamp, and a timing block. Everything but
/// timestamp and timing is a function of the config alone.
nlohmann::json run(const RunConfig& config);

/// Manifest without its timestamp and timing block.
nlohmann::json deterministic_part(nlohmann::json manifest);

/// Training and validation sets: IDX files when configured, otherwise the
/// synthetic generator on the "data" stream. Both are normalized.
std::pair<Dataset, Dataset> load_datasets(const RunConfig& config);

}  // namespace smi
