// sparseadapter: prune / train / eval / sweep / inspect-mask front end.
//
// Exit status: 0 ok, 1 error, 2 usage, 3 training diverged, 4 sweep aborted.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sparseadapter/config.hpp"
#include "sparseadapter/errors.hpp"
#include "sparseadapter/experiment.hpp"
#include "sparseadapter/serialization.hpp"

namespace fs = std::filesystem;
using namespace sparseadapter;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, "output directory (overrides config output_dir)");
  cmd->add_option("--seed", c.seed, "run seed for init, pruning and shuffling");
}

// Loads the config and applies --seed, --out and SPARSEADAPTER_OUT, in that order.
ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = load_config(c.config);
  if (c.seed) set_run_seed(cfg, *c.seed);
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (const char* env = std::getenv("SPARSEADAPTER_OUT"); env != nullptr && *env != '\0') cfg.output_dir = env;
  cfg.validate();
  return cfg;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse adapter pruning and training at desk scale"};
  app.require_subcommand(1);

  Common prune_opts;
  std::string prune_mask;
  auto* prune = app.add_subcommand("prune", "score and prune adapter weights, write a mask file");
  add_common(prune, prune_opts);
  prune->add_option("--mask", prune_mask, "mask output path (default <out>/mask.sadm)");

  Common train_opts;
  std::string train_mask;
  auto* train_cmd = app.add_subcommand("train", "train adapters, optionally under a mask file");
  add_common(train_cmd, train_opts);
  train_cmd->add_option("--mask", train_mask, "mask file to train under")->check(CLI::ExistingFile);

  Common eval_opts;
  std::string eval_ckpt;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the eval split");
  add_common(eval_cmd, eval_opts);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file (default <out>/checkpoint.sacp)");

  Common sweep_opts;
  std::string axis;
  std::string values;
  std::size_t seeds = 3;
  std::size_t workers = 1;
  auto* sweep = app.add_subcommand("sweep", "run a grid of configs over several seeds");
  add_common(sweep, sweep_opts);
  sweep->add_option("--sweep-axis", axis, "sparsity, method or large-sparse")->required();
  sweep->add_option("--values", values, "comma-separated axis values")->required();
  sweep->add_option("--seeds", seeds, "seeds per point")->check(CLI::PositiveNumber);
  sweep->add_option("--workers", workers, "parallel runs")->check(CLI::PositiveNumber);

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect-mask", "print a mask file's contents");
  inspect->add_option("--mask,mask", inspect_path, "mask file")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*prune) {
      const ExperimentConfig cfg = resolve(prune_opts);
      const fs::path path = prune_mask.empty() ? fs::path(cfg.output_dir) / "mask.sadm" : fs::path(prune_mask);
      if (!cfg.prune.method) throw ConfigError("prune.method is 'none'; nothing to prune");
      const Model model = build_model(cfg);
      const SplitData data = load_data(cfg);
      const PruneMask mask = compute_mask(cfg, model, data.train);
      if (path.has_parent_path()) fs::create_directories(path.parent_path());
      save_mask(path, mask);
      describe_mask(std::cout, mask);
      std::cout << "wrote " << path.string() << "\n";
    } else if (*train_cmd) {
      const ExperimentConfig cfg = resolve(train_opts);
      TrainOptions opts;
      if (!train_mask.empty()) opts.mask_path = train_mask;
      const TrainResult r = run_train(cfg, cfg.output_dir, opts);
      std::cout << "final_eval_accuracy " << r.metrics.final_eval_accuracy << "\n"
                << "final_eval_loss " << r.metrics.final_eval_loss << "\n"
                << "kept_fraction " << r.report.weight_fraction_kept << "\n"
                << "wrote " << cfg.output_dir << "\n";
    } else if (*eval_cmd) {
      const ExperimentConfig cfg = resolve(eval_opts);
      const fs::path ckpt = eval_ckpt.empty() ? fs::path(cfg.output_dir) / "checkpoint.sacp" : fs::path(eval_ckpt);
      const EvalResult r = run_eval(cfg, ckpt);
      std::cout << "eval_loss " << r.loss << "\n" << "eval_accuracy " << r.accuracy << "\n";
    } else if (*sweep) {
      const ExperimentConfig cfg = resolve(sweep_opts);
      SweepOptions opts;
      opts.axis = parse_sweep_axis(axis);
      opts.values = split_csv(values);
      opts.seeds = seeds;
      opts.workers = workers;
      opts.log = &std::cerr;
      const SweepResult r = run_sweep(cfg, opts, cfg.output_dir);
      write_sweep_csv(std::cout, r);
      if (r.error) {
        std::cerr << "sweep aborted: " << *r.error << "\n";
        return 4;
      }
    } else if (*inspect) {
      describe_mask(std::cout, load_mask(inspect_path));
    }
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
