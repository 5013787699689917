#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sparseadapter/data.hpp"
#include "sparseadapter/model.hpp"

namespace sparseadapter {

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double peak_lr = 1e-3;
  double warmup_fraction = 0.10;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;  // data shuffling
  std::size_t eval_every = 0;  // steps between evaluations; 0 = once per epoch

  void validate() const;
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

// Linear warmup to peak over ceil(warmup_fraction * total) steps, then linear decay to 0 at total.
double lr_at(std::size_t step, std::size_t total_steps, const OptimizerConfig& cfg);

struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::size_t step = 0;
};

// One decoupled-weight-decay Adam update of a single tensor (t is the 1-based step).
// Positions with mask[i] == 0 end with w, m, v all exactly 0.
void adam_update(Tensor& w, const Tensor& g, Tensor& m, Tensor& v, std::size_t t, const OptimizerConfig& cfg,
                 double lr, const std::vector<std::uint8_t>* mask = nullptr);

// Adam over every trainable group of the model, honoring its registered mask.
// Frozen groups are never touched.
void masked_adam_step(Model& model, const GradMap& grads, AdamState& state, const OptimizerConfig& cfg, double lr);

struct MetricRecord {
  std::size_t step = 0;
  std::string split;  // "train" or "eval"
  double loss = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
  double kept_fraction = 0.0;
  friend bool operator==(const MetricRecord&, const MetricRecord&) = default;
};

struct RunMetrics {
  std::vector<MetricRecord> records;
  std::size_t total_steps = 0;
  double final_eval_loss = 0.0;
  double final_eval_accuracy = 0.0;
  double best_eval_accuracy = 0.0;
  std::map<double, std::optional<std::size_t>> steps_to_threshold;
  friend bool operator==(const RunMetrics&, const RunMetrics&) = default;
};

// First evaluated step whose accuracy reaches `threshold`.
std::optional<std::size_t> steps_to_threshold(const RunMetrics& metrics, double threshold);

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t step, const std::string& detail)
      : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + detail), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

EvalResult evaluate(const Model& model, const Dataset& data, std::size_t batch_size = 64);

// Called after every optimizer step with the 1-based step count.
using StepHook = std::function<void(std::size_t step, const Model&, const AdamState&)>;

// Fine-tunes the trainable groups. Eval accuracy thresholds listed in
// `thresholds` are tracked in RunMetrics::steps_to_threshold.
RunMetrics train(Model& model, const Dataset& train_data, const Dataset& eval_data, const OptimizerConfig& cfg,
                 const std::vector<double>& thresholds = {}, const StepHook& hook = {});

// step,split,loss,accuracy,lr,kept_fraction
void write_metrics_csv(std::ostream& out, const RunMetrics& metrics);

}  // namespace sparseadapter
