#include "sparseadapter/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "sparseadapter/errors.hpp"
#include "sparseadapter/rng.hpp"
#include "sparseadapter/serialization.hpp"

namespace sparseadapter {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kAdapterStream = 0xADA9'7E55ULL;

Dataset reparse(const Dataset& d) {
  std::stringstream ss;
  write_jsonl(ss, d);
  return read_jsonl(ss);
}

// Shortest string that parses back to v.
std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

json summary_json(const ExperimentConfig& cfg, const TrainResult& r) {
  json thresholds = json::object();
  for (const auto& [t, step] : r.metrics.steps_to_threshold) {
    thresholds[fmt(t)] = step ? json(*step) : json(nullptr);
  }
  const ParamReport& p = r.report;
  return {
      {"diverged", false},
      {"method", cfg.prune.method ? std::string(to_string(*cfg.prune.method)) : std::string("none")},
      {"s", cfg.prune.s},
      {"r", cfg.adapter.r},
      {"seed", cfg.seed},
      {"total_steps", r.metrics.total_steps},
      {"final_eval_loss", r.metrics.final_eval_loss},
      {"final_eval_accuracy", r.metrics.final_eval_accuracy},
      {"best_eval_accuracy", r.metrics.best_eval_accuracy},
      {"steps_to_threshold", thresholds},
      {"kept_fraction", p.weight_fraction_kept},
      {"params",
       {{"backbone", p.total_backbone}, {"adapter_total", p.adapter_total}, {"adapter_prunable", p.adapter_prunable},
        {"adapter_kept", p.adapter_kept}, {"prunable_kept", p.prunable_kept}, {"head", p.head}, {"total", p.total},
        {"fraction_kept", p.fraction_kept}, {"fraction_kept_with_head", p.fraction_kept_with_head}}},
  };
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

double mean_of(const std::vector<double>& xs) {
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

// Sample standard deviation (n - 1); 0 for a single value.
double std_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return xs.empty() ? std::numeric_limits<double>::quiet_NaN() : 0.0;
  const double m = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

}  // namespace

SplitData load_data(const ExperimentConfig& cfg) {
  SplitData out;
  if (cfg.data.synthetic) {
    SplitData raw = generate_synthetic(*cfg.data.synthetic);
    out.train = reparse(raw.train);
    out.eval = reparse(raw.eval);
  } else {
    out.train = load_jsonl(cfg.data.train_path);
    out.eval = load_jsonl(cfg.data.eval_path);
  }
  check_data_fits(cfg, out);
  return out;
}

void check_data_fits(const ExperimentConfig& cfg, const SplitData& data) {
  auto check = [&](const Dataset& d, const char* split) {
    if (d.empty()) throw ConfigError(std::string(split) + " split is empty");
    if (d.seq_len() > cfg.encoder.max_seq_len) {
      throw ConfigError(std::string(split) + " sequences have length " + std::to_string(d.seq_len()) +
                        ", encoder.max_seq_len is " + std::to_string(cfg.encoder.max_seq_len));
    }
    for (const Example& e : d.examples) {
      if (static_cast<std::size_t>(e.label) >= cfg.encoder.n_classes) {
        throw ConfigError(std::string(split) + " label " + std::to_string(e.label) + " >= encoder.n_classes");
      }
      for (int t : e.tokens) {
        if (static_cast<std::size_t>(t) >= cfg.encoder.vocab_size) {
          throw ConfigError(std::string(split) + " token " + std::to_string(t) + " >= encoder.vocab_size");
        }
      }
    }
  };
  check(data.train, "train");
  check(data.eval, "eval");
  if (data.train.seq_len() != data.eval.seq_len()) throw ConfigError("train and eval sequence lengths differ");
}

Model build_model(const ExperimentConfig& cfg) {
  Model m = build_encoder(cfg.encoder, cfg.seed);
  freeze_backbone(m);
  insert_adapters(m, cfg.adapter, splitmix64(cfg.seed ^ kAdapterStream));
  return m;
}

PruneMask compute_mask(const ExperimentConfig& cfg, const Model& model, const Dataset& train) {
  if (!cfg.prune.method) throw ContractViolation("compute_mask: config has no prune method");
  const PruneMethod method = *cfg.prune.method;
  const double s = cfg.prune.s;
  auto scored_batches = [&] {
    std::vector<TokenBatch> batches = make_batches(train, cfg.optimizer.batch_size);
    batches.resize(std::min(batches.size(), cfg.prune.score_batches));
    return batches;
  };
  try {
    switch (method) {
      case PruneMethod::er: return score_er(model, s, cfg.prune.seed);
      case PruneMethod::random:
        return prune_by_percentile(score_random(model, cfg.prune.seed), s, cfg.prune.seed, cfg.prune.scope);
      case PruneMethod::magnitude:
        return prune_by_percentile(score_magnitude(model), s, cfg.prune.seed, cfg.prune.scope);
      case PruneMethod::snip: {
        const auto batches = scored_batches();
        return prune_by_percentile(score_snip(model, batches, cross_entropy_loss(), cfg.prune.snip_abs), s,
                                   cfg.prune.seed, cfg.prune.scope);
      }
      case PruneMethod::grasp: {
        const auto batches = scored_batches();
        return prune_by_percentile(score_grasp(model, batches, cross_entropy_loss()), s, cfg.prune.seed,
                                   cfg.prune.scope);
      }
    }
  } catch (const NumericFailure& e) {
    throw NumericFailure(std::string(to_string(method)) + " scoring", e.what());
  }
  throw ContractViolation("unreachable prune method");
}

void check_mask_fits(const PruneMask& mask, const Model& model) {
  for (const ParamGroup& g : model.params()) {
    if (!g.prunable) continue;
    if (!mask.contains(g.name)) throw FormatError("mask is missing prunable group '" + g.name + "'");
    if (mask.size(g.name) != g.tensor.numel()) {
      throw FormatError("mask group '" + g.name + "' has " + std::to_string(mask.size(g.name)) +
                        " elements, model expects " + std::to_string(g.tensor.numel()));
    }
  }
  for (const auto& [name, bits] : mask.groups()) {
    if (!model.has_param(name) || !model.param(name).prunable) {
      throw FormatError("mask group '" + name + "' is not a prunable group of the model");
    }
  }
}

void describe_mask(std::ostream& out, const PruneMask& mask) {
  out << "method " << to_string(mask.method()) << "\n";
  out << "s " << fmt(mask.sparsity()) << "\n";
  out << "seed " << mask.seed() << "\n";
  out << "groups " << mask.groups().size() << "\n";
  for (const auto& [name, bits] : mask.groups()) {
    const std::size_t kept = mask.kept(name);
    const double sparsity = bits.empty() ? 0.0 : 1.0 - static_cast<double>(kept) / static_cast<double>(bits.size());
    out << "  " << name << " elements=" << bits.size() << " kept=" << kept << " sparsity=" << std::fixed
        << std::setprecision(6) << sparsity << std::defaultfloat << "\n";
  }
  out << "total elements=" << mask.total_size() << " kept=" << mask.total_kept() << " sparsity=" << std::fixed
      << std::setprecision(6) << mask.achieved_sparsity() << std::defaultfloat << "\n";
}

TrainResult run_train(const ExperimentConfig& cfg, const fs::path& out_dir, const TrainOptions& opts) {
  cfg.validate();
  Model model = build_model(cfg);
  std::optional<PruneMask> file_mask;
  if (opts.mask_path) {
    file_mask = load_mask(*opts.mask_path);
    check_mask_fits(*file_mask, model);
  }
  SplitData data = load_data(cfg);

  TrainResult result;
  if (file_mask) {
    result.mask = std::move(file_mask);
  } else if (cfg.prune.method) {
    result.mask = compute_mask(cfg, model, data.train);
  }
  if (result.mask) apply_mask(model, std::make_shared<const PruneMask>(*result.mask));
  result.report = trainable_param_report(model);

  if (opts.write_artifacts) {
    fs::create_directories(out_dir);
    save_config(out_dir / "config.json", cfg);
    if (result.mask && !opts.mask_path) save_mask(out_dir / "mask.sadm", *result.mask);
  }
  try {
    result.metrics = train(model, data.train, data.eval, cfg.optimizer, cfg.thresholds, opts.hook);
  } catch (const DivergenceError& e) {
    if (opts.write_artifacts) {
      json j = summary_json(cfg, result);
      j["diverged"] = true;
      j["diverged_at_step"] = e.step();
      j["error"] = e.what();
      write_text(out_dir / "summary.json", j.dump(2) + "\n");
    }
    throw;
  }
  if (opts.write_artifacts) {
    std::ofstream csv(out_dir / "metrics.csv");
    if (!csv) throw FormatError("cannot write " + (out_dir / "metrics.csv").string());
    write_metrics_csv(csv, result.metrics);
    write_text(out_dir / "summary.json", summary_json(cfg, result).dump(2) + "\n");
    save_checkpoint(out_dir / "checkpoint.sacp", model);
  }
  if (opts.keep_model) result.model = std::move(model);
  return result;
}

EvalResult run_eval(const ExperimentConfig& cfg, const fs::path& checkpoint) {
  cfg.validate();
  Model model = build_model(cfg);
  load_checkpoint(checkpoint, model);
  SplitData data = load_data(cfg);
  return evaluate(model, data.eval, std::max<std::size_t>(cfg.optimizer.batch_size, 64));
}

std::string_view to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::sparsity: return "sparsity";
    case SweepAxis::method: return "method";
    case SweepAxis::large_sparse: return "large-sparse";
  }
  return "unknown";
}

SweepAxis parse_sweep_axis(std::string_view name) {
  for (auto a : {SweepAxis::sparsity, SweepAxis::method, SweepAxis::large_sparse}) {
    if (to_string(a) == name) return a;
  }
  throw ConfigError("unknown sweep axis '" + std::string(name) + "' (expected sparsity, method or large-sparse)");
}

std::vector<SweepPoint> sweep_points(const ExperimentConfig& base, SweepAxis axis, const std::vector<std::string>& values) {
  if (values.empty()) throw ConfigError("sweep needs at least one axis value");
  std::vector<SweepPoint> out;
  for (const std::string& v : values) {
    SweepPoint p;
    p.label = v;
    p.config = base;
    std::size_t used = 0;
    try {
      switch (axis) {
        case SweepAxis::sparsity: {
          const double s = std::stod(v, &used);
          p.config.prune.s = s;
          if (!p.config.prune.method) p.config.prune.method = PruneMethod::random;
          break;
        }
        case SweepAxis::method:
          used = v.size();
          if (v == "none") {
            p.config.prune.method.reset();
            p.config.prune.s = 0.0;
          } else {
            p.config.prune.method = parse_prune_method(v);
          }
          break;
        case SweepAxis::large_sparse: {
          const long k = std::stol(v, &used);
          if (k < 1) throw ConfigError("large-sparse k must be >= 1, got " + v);
          const LargeSparseConfig ls = large_sparse_config(base.adapter.r, static_cast<std::size_t>(k));
          p.config.adapter.r = ls.r;
          p.config.adapter.allow_wide = base.adapter.allow_wide || ls.r >= base.encoder.d_model;
          p.config.prune.s = ls.s;
          if (ls.s == 0.0) {
            p.config.prune.method.reset();
          } else if (!p.config.prune.method) {
            p.config.prune.method = PruneMethod::snip;
          }
          break;
        }
      }
    } catch (const std::logic_error& e) {
      throw ConfigError("bad " + std::string(to_string(axis)) + " value '" + v + "': " + e.what());
    }
    if (used != v.size()) throw ConfigError("bad " + std::string(to_string(axis)) + " value '" + v + "'");
    p.config.validate();
    p.method = p.config.prune.method;
    p.s = p.config.prune.s;
    p.r = p.config.adapter.r;
    out.push_back(std::move(p));
  }
  return out;
}

SweepResult run_sweep(const ExperimentConfig& base, const SweepOptions& opts, const fs::path& out_dir) {
  if (opts.seeds < 3) throw ConfigError("sweep needs at least 3 seeds per point");
  if (opts.workers < 1) throw ConfigError("sweep needs at least one worker");
  const std::vector<SweepPoint> points = sweep_points(base, opts.axis, opts.values);
  const std::size_t n_runs = points.size() * opts.seeds;

  std::vector<std::optional<TrainResult>> results(n_runs);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::mutex mu;
  std::string error;

  auto run_dir = [&](std::size_t p, std::size_t k) {
    return out_dir / "runs" / (std::string(to_string(opts.axis)) + "-" + points[p].label) / ("seed" + std::to_string(base.seed + k));
  };
  auto worker = [&] {
    while (!failed.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n_runs) return;
      const std::size_t p = i / opts.seeds;
      const std::size_t k = i % opts.seeds;
      ExperimentConfig cfg = points[p].config;
      set_run_seed(cfg, base.seed + k);
      const fs::path dir = run_dir(p, k);
      cfg.output_dir = dir.string();
      try {
        results[i] = run_train(cfg, dir, TrainOptions{std::nullopt, opts.write_run_artifacts, {}, false});
        if (opts.log) {
          std::lock_guard lock(mu);
          *opts.log << to_string(opts.axis) << "=" << points[p].label << " seed=" << cfg.seed
                    << " final_accuracy=" << results[i]->metrics.final_eval_accuracy << "\n";
        }
      } catch (const std::exception& e) {
        std::lock_guard lock(mu);
        if (!failed.exchange(true)) {
          error = std::string(to_string(opts.axis)) + "=" + points[p].label + " seed=" + std::to_string(cfg.seed) +
                  ": " + e.what();
        }
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const std::size_t n_workers = std::min(opts.workers, n_runs);
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  }

  SweepResult out;
  if (failed) out.error = error;
  double threshold = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t p = 0; p < points.size(); ++p) {
    bool complete = true;
    for (std::size_t k = 0; k < opts.seeds; ++k) complete = complete && results[p * opts.seeds + k].has_value();
    if (!complete) continue;
    std::vector<double> acc, kept;
    for (std::size_t k = 0; k < opts.seeds; ++k) {
      const TrainResult& r = *results[p * opts.seeds + k];
      acc.push_back(r.metrics.final_eval_accuracy);
      kept.push_back(r.report.weight_fraction_kept);
    }
    if (p == 0) threshold = 0.9 * mean_of(acc);
    SweepRow row;
    row.label = points[p].label;
    row.method = points[p].method ? std::string(to_string(*points[p].method)) : "none";
    row.s = points[p].s;
    row.r = points[p].r;
    row.seeds = opts.seeds;
    row.kept_fraction = mean_of(kept);
    row.accuracy_mean = mean_of(acc);
    row.accuracy_std = std_of(acc);
    row.threshold = threshold;
    std::vector<double> steps;
    for (std::size_t k = 0; k < opts.seeds; ++k) {
      if (std::isnan(threshold)) break;
      if (auto st = steps_to_threshold(results[p * opts.seeds + k]->metrics, threshold)) {
        steps.push_back(static_cast<double>(*st));
      }
    }
    row.reached = steps.size();
    row.steps_mean = mean_of(steps);
    row.steps_std = std_of(steps);
    out.rows.push_back(row);
    for (std::size_t k = 0; k < opts.seeds; ++k) {
      out.runs.push_back({p, base.seed + k, std::move(*results[p * opts.seeds + k])});
    }
  }

  fs::create_directories(out_dir);
  {
    std::ofstream csv(out_dir / "sweep.csv");
    if (!csv) throw FormatError("cannot write " + (out_dir / "sweep.csv").string());
    write_sweep_csv(csv, out);
  }
  {
    std::ofstream csv(out_dir / "runs.csv");
    if (!csv) throw FormatError("cannot write " + (out_dir / "runs.csv").string());
    csv << "point,method,s,r,seed,kept_fraction,final_accuracy,final_loss,total_steps\n";
    for (const SweepRun& run : out.runs) {
      const SweepPoint& p = points[run.point];
      csv << p.label << "," << (p.method ? std::string(to_string(*p.method)) : "none") << "," << fmt(p.s) << "," << p.r
          << "," << run.seed << "," << fmt(run.result.report.weight_fraction_kept) << ","
          << fmt(run.result.metrics.final_eval_accuracy) << "," << fmt(run.result.metrics.final_eval_loss) << ","
          << run.result.metrics.total_steps << "\n";
    }
    if (out.error) csv << "# aborted: " << *out.error << "\n";
  }
  return out;
}

void write_sweep_csv(std::ostream& out, const SweepResult& result) {
  out << "point,method,s,r,seeds,kept_fraction,final_accuracy_mean,final_accuracy_std,threshold,"
         "threshold_reached,steps_to_threshold_mean,steps_to_threshold_std\n";
  for (const SweepRow& r : result.rows) {
    out << r.label << "," << r.method << "," << fmt(r.s) << "," << r.r << "," << r.seeds << "," << fmt(r.kept_fraction)
        << "," << fmt(r.accuracy_mean) << "," << fmt(r.accuracy_std) << "," << fmt(r.threshold) << "," << r.reached
        << "," << fmt(r.steps_mean) << "," << fmt(r.steps_std) << "\n";
  }
  if (result.error) out << "# aborted: " << *result.error << "\n";
}

}  // namespace sparseadapter
