#include "sparseadapter/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "sparseadapter/adapters.hpp"
#include "sparseadapter/errors.hpp"
#include "sparseadapter/ops.hpp"
#include "sparseadapter/pruning.hpp"
#include "sparseadapter/rng.hpp"

namespace sparseadapter {

void OptimizerConfig::validate() const {
  if (!(peak_lr > 0.0)) throw ConfigError("optimizer: peak_lr must be > 0");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("optimizer: warmup_fraction must be in [0, 1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optimizer: betas must be in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("optimizer: eps must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("optimizer: weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("optimizer: batch_size must be >= 1");
}

double lr_at(std::size_t step, std::size_t total_steps, const OptimizerConfig& cfg) {
  if (step > total_steps) {
    throw ContractViolation("lr_at: step " + std::to_string(step) + " beyond total " + std::to_string(total_steps));
  }
  if (step == total_steps) return 0.0;
  const auto warmup = static_cast<std::size_t>(std::ceil(cfg.warmup_fraction * static_cast<double>(total_steps)));
  if (step < warmup) return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  return cfg.peak_lr * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup);
}

void adam_update(Tensor& w, const Tensor& g, Tensor& m, Tensor& v, std::size_t t, const OptimizerConfig& cfg,
                 double lr, const std::vector<std::uint8_t>* mask) {
  if (g.shape() != w.shape() || m.shape() != w.shape() || v.shape() != w.shape()) {
    throw ContractViolation("adam: shape mismatch between weight " + shape_to_string(w.shape()) + " and gradient " +
                            shape_to_string(g.shape()));
  }
  if (mask != nullptr && mask->size() != w.numel()) throw ContractViolation("adam: mask size mismatch");
  if (t < 1) throw ContractViolation("adam: step count starts at 1");
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const double decay = 1.0 - lr * cfg.weight_decay;
  for (std::size_t i = 0; i < w.numel(); ++i) {
    if (mask != nullptr && (*mask)[i] == 0) {
      w[i] = 0.0;
      m[i] = 0.0;
      v[i] = 0.0;
      continue;
    }
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
    w[i] = w[i] * decay - lr * update;
    if (!std::isfinite(w[i])) throw NumericFailure("adam", "non-finite weight after update");
  }
}

void masked_adam_step(Model& model, const GradMap& grads, AdamState& state, const OptimizerConfig& cfg, double lr) {
  const PruneMask* mask = model.mask();
  ++state.step;
  for (ParamGroup& g : model.params()) {
    if (!g.trainable) continue;
    auto it = grads.find(g.name);
    if (it == grads.end()) throw ContractViolation("adam: no gradient for trainable group '" + g.name + "'");
    auto [m, fresh_m] = state.m.try_emplace(g.name, g.tensor.shape());
    auto [v, fresh_v] = state.v.try_emplace(g.name, g.tensor.shape());
    const std::vector<std::uint8_t>* bits = (mask != nullptr && g.prunable) ? &mask->bits(g.name) : nullptr;
    adam_update(g.tensor, it->second, m->second, v->second, state.step, cfg, lr, bits);
  }
}

std::optional<std::size_t> steps_to_threshold(const RunMetrics& metrics, double threshold) {
  for (const MetricRecord& r : metrics.records) {
    if (r.split == "eval" && r.accuracy >= threshold) return r.step;
  }
  return std::nullopt;
}

namespace {

std::size_t correct_predictions(const Tensor& logits, const std::vector<int>& labels) {
  const std::size_t k = logits.cols();
  std::size_t correct = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const double* row = logits.ptr() + r * k;
    const auto pred = static_cast<int>(std::max_element(row, row + k) - row);
    if (pred == labels[r]) ++correct;
  }
  return correct;
}

}  // namespace

EvalResult evaluate(const Model& model, const Dataset& data, std::size_t batch_size) {
  if (data.empty()) throw ContractViolation("evaluate: empty dataset");
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (const TokenBatch& b : make_batches(data, batch_size)) {
    Tape tape;
    tape.set_grad_enabled(false);
    ParamBinder binder(tape, model, false);
    Var logits = forward(model, binder, b);
    Var loss = ops::cross_entropy(logits, b.labels);
    loss_sum += loss.value().item() * static_cast<double>(b.batch);
    correct += correct_predictions(logits.value(), b.labels);
  }
  const double n = static_cast<double>(data.size());
  return {loss_sum / n, static_cast<double>(correct) / n};
}

RunMetrics train(Model& model, const Dataset& train_data, const Dataset& eval_data, const OptimizerConfig& cfg,
                 const std::vector<double>& thresholds, const StepHook& hook) {
  cfg.validate();
  if (train_data.empty()) throw ContractViolation("train: empty training dataset");
  RunMetrics metrics;
  if (cfg.epochs == 0) return metrics;
  if (eval_data.empty()) throw ContractViolation("train: empty evaluation dataset");

  const std::size_t steps_per_epoch = (train_data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = cfg.epochs * steps_per_epoch;
  const std::size_t eval_interval = cfg.eval_every > 0 ? cfg.eval_every : steps_per_epoch;
  const double kept_fraction = trainable_param_report(model).weight_fraction_kept;
  metrics.total_steps = total;

  AdamState state;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(train_data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = Rng::derive(cfg.seed, epoch);
    rng.shuffle(order);
    for (const TokenBatch& batch : make_batches(train_data, cfg.batch_size, order)) {
      const double lr = lr_at(step, total, cfg);
      double loss_value = 0.0;
      std::size_t correct = 0;
      try {
        Tape tape;
        ParamBinder binder(tape, model, true);
        Var logits = forward(model, binder, batch);
        Var loss = ops::cross_entropy(logits, batch.labels);
        loss_value = loss.value().item();
        correct = correct_predictions(logits.value(), batch.labels);
        masked_adam_step(model, backward(loss), state, cfg, lr);
      } catch (const NumericFailure& e) {
        throw DivergenceError(step + 1, e.what());
      }
      ++step;
      if (hook) hook(step, model, state);
      metrics.records.push_back({step, "train", loss_value,
                                 static_cast<double>(correct) / static_cast<double>(batch.batch), lr, kept_fraction});
      if (step % eval_interval == 0 || step == total) {
        const EvalResult ev = evaluate(model, eval_data, std::max<std::size_t>(cfg.batch_size, 64));
        metrics.records.push_back({step, "eval", ev.loss, ev.accuracy, lr, kept_fraction});
        metrics.final_eval_loss = ev.loss;
        metrics.final_eval_accuracy = ev.accuracy;
        metrics.best_eval_accuracy = std::max(metrics.best_eval_accuracy, ev.accuracy);
      }
    }
  }
  for (double t : thresholds) metrics.steps_to_threshold[t] = steps_to_threshold(metrics, t);
  return metrics;
}

void write_metrics_csv(std::ostream& out, const RunMetrics& metrics) {
  out << "step,split,loss,accuracy,lr,kept_fraction\n";
  char buf[256];
  for (const MetricRecord& r : metrics.records) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g,%.17g,%.17g\n", r.step, r.split.c_str(), r.loss, r.accuracy,
                  r.lr, r.kept_fraction);
    out << buf;
  }
}

}  // namespace sparseadapter
