#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sparseadapter/adapters.hpp"
#include "sparseadapter/config.hpp"
#include "sparseadapter/data.hpp"
#include "sparseadapter/pruning.hpp"
#include "sparseadapter/training.hpp"

namespace sparseadapter {

// Train/eval splits for a config. Synthetic tasks are rendered to JSONL and
// parsed back, so every dataset goes through the same reader.
SplitData load_data(const ExperimentConfig& cfg);
// Token ids, labels and lengths must fit the encoder. Throws ConfigError.
void check_data_fits(const ExperimentConfig& cfg, const SplitData& data);

// Frozen backbone from cfg.seed plus adapters from a stream derived from it.
Model build_model(const ExperimentConfig& cfg);

// Mask for cfg.prune; SNIP/GraSP score the first score_batches batches of train in file order.
PruneMask compute_mask(const ExperimentConfig& cfg, const Model& model, const Dataset& train);

// Mask file groups and sizes must equal the model's prunable groups. Throws FormatError naming the group.
void check_mask_fits(const PruneMask& mask, const Model& model);

// Per-group and global counts, one group per line.
void describe_mask(std::ostream& out, const PruneMask& mask);

struct TrainResult {
  RunMetrics metrics;
  ParamReport report;
  std::optional<PruneMask> mask;
  std::optional<Model> model;  // trained model, when TrainOptions::keep_model
};

struct TrainOptions {
  std::optional<std::filesystem::path> mask_path;
  bool write_artifacts = true;
  StepHook hook;
  bool keep_model = false;
};

// Writes config.json, metrics.csv, summary.json and checkpoint.sacp (plus mask.sadm
// when pruning inline) under out_dir. A mask file is validated before anything is written.
// Divergence writes summary.json with "diverged": true and rethrows.
TrainResult run_train(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, const TrainOptions& opts = {});

// Evaluates a saved checkpoint on the config's eval split.
EvalResult run_eval(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint);

enum class SweepAxis { sparsity, method, large_sparse };

std::string_view to_string(SweepAxis a);
SweepAxis parse_sweep_axis(std::string_view name);

struct SweepPoint {
  std::string label;  // the axis value as given
  std::optional<PruneMethod> method;
  double s = 0.0;
  std::size_t r = 0;
  ExperimentConfig config;  // seed fields set per run
};

// sparsity: values are s, method from the config (random when none).
// method: values are method names or "none", s from the config.
// large-sparse: values are k, r = k * adapter.r, s = 1 - 1/k, method from the config (snip when none).
std::vector<SweepPoint> sweep_points(const ExperimentConfig& base, SweepAxis axis, const std::vector<std::string>& values);

struct SweepRow {
  std::string label;
  std::string method;
  double s = 0.0;
  std::size_t r = 0;
  std::size_t seeds = 0;
  double kept_fraction = 0.0;
  double accuracy_mean = 0.0;
  double accuracy_std = 0.0;
  double threshold = 0.0;
  std::size_t reached = 0;  // seeds whose eval accuracy reached the threshold
  double steps_mean = 0.0;  // over seeds that reached it; NaN if none did
  double steps_std = 0.0;
};

struct SweepRun {
  std::size_t point = 0;
  std::uint64_t seed = 0;
  TrainResult result;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<SweepRun> runs;
  std::optional<std::string> error;  // set when a run failed and the sweep aborted
};

struct SweepOptions {
  SweepAxis axis = SweepAxis::sparsity;
  std::vector<std::string> values;
  std::size_t seeds = 3;
  std::size_t workers = 1;
  bool write_run_artifacts = true;
  std::ostream* log = nullptr;
};

// Runs every point for seeds base.seed .. base.seed + seeds - 1 on a worker pool, then writes
// sweep.csv and runs.csv under out_dir. steps_to_threshold uses 0.9 x the first point's mean
// final accuracy. A failing run stops scheduling; completed points are still written and the
// CSV ends with a "# aborted" line.
SweepResult run_sweep(const ExperimentConfig& base, const SweepOptions& opts, const std::filesystem::path& out_dir);

void write_sweep_csv(std::ostream& out, const SweepResult& result);

}  // namespace sparseadapter
