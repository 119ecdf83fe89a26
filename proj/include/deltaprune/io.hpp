#pragma once

#include <filesystem>
#include <string>

#include "deltaprune/tasks.hpp"

namespace dp {

// Checkpoint layout: <dir>/manifest.json plus one raw little-endian,
// row-major f64 binary per tensor. load(save(m)) is bitwise identical.
void save_checkpoint(const ToyModel& m, const std::filesystem::path& dir);
ToyModel load_checkpoint(const std::filesystem::path& dir);

std::string read_text_file(const std::filesystem::path& p);
void write_text_file(const std::filesystem::path& p, const std::string& text);

std::string config_to_json(const ToyConfig& c);
ToyConfig config_from_json(const std::string& text);

// Metrics document for a training run; byte-deterministic for a fixed seed
// (no timing information included).
std::string train_metrics_json(const TrainMetrics& metrics);

}  // namespace dp
