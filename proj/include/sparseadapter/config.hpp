#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparseadapter/data.hpp"
#include "sparseadapter/model.hpp"
#include "sparseadapter/pruning.hpp"
#include "sparseadapter/training.hpp"

namespace sparseadapter {

struct PruneConfig {
  std::optional<PruneMethod> method;  // nullopt = dense, written as "none"
  double s = 0.0;
  std::uint64_t seed = 0;
  bool snip_abs = false;
  std::size_t score_batches = 1;  // leading training batches (file order) fed to SNIP/GraSP
  ThresholdScope scope = ThresholdScope::global;
  friend bool operator==(const PruneConfig&, const PruneConfig&) = default;
};

// Either a synthetic task or a pair of JSONL files.
struct DataConfig {
  std::optional<SyntheticTaskSpec> synthetic;
  std::string train_path;
  std::string eval_path;
  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct ExperimentConfig {
  EncoderConfig encoder;
  AdapterSpec adapter;
  PruneConfig prune;
  OptimizerConfig optimizer;
  DataConfig data;
  std::string output_dir = "runs/default";
  std::uint64_t seed = 0;  // backbone and adapter init
  std::vector<double> thresholds;  // eval accuracies tracked in steps_to_threshold

  // Whole-config checks, run before any compute. Throws ConfigError.
  void validate() const;
  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

// The three run seeds (init, prune, shuffle) all set to `seed`.
void set_run_seed(ExperimentConfig& cfg, std::uint64_t seed);

nlohmann::json to_json(const ExperimentConfig& cfg);
// Missing keys take defaults; unknown keys and wrong types throw ConfigError. Validates.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig parse_config(const std::string& text);
std::string serialize_config(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const ExperimentConfig& cfg);

}  // namespace sparseadapter
