#include "sparseadapter/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "sparseadapter/errors.hpp"

namespace sparseadapter {

using nlohmann::json;

namespace {

// Reads keys from one JSON object and rejects any key it was not asked about.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) throw ConfigError(where() + "unknown key '" + key + "'");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config: " : path_ + ": "; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class Fn>
auto parse_name(const std::string& path, Fn&& fn) {
  try {
    return fn();
  } catch (const ContractViolation& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string scope_name(ThresholdScope s) { return s == ThresholdScope::global ? "global" : "per_group"; }

json synthetic_json(const SyntheticTaskSpec& t) {
  return {{"task", std::string(to_string(t.task))}, {"vocab", t.vocab}, {"seq_len", t.seq_len},
          {"n_classes", t.n_classes}, {"n_train", t.n_train}, {"n_eval", t.n_eval},
          {"noise_rate", t.noise_rate}, {"seed", t.seed}};
}

}  // namespace

void set_run_seed(ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.seed = seed;
  cfg.prune.seed = seed;
  cfg.optimizer.seed = seed;
}

void ExperimentConfig::validate() const {
  try {
    encoder.validate();
    adapter.validate(encoder.d_model);
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  optimizer.validate();
  if (!(prune.s >= 0.0 && prune.s < 1.0)) throw ConfigError("prune.s must be in [0, 1)");
  if (!prune.method && prune.s != 0.0) throw ConfigError("prune.s > 0 requires a prune.method");
  if (prune.score_batches < 1) throw ConfigError("prune.score_batches must be >= 1");
  if (data.synthetic) {
    if (!data.train_path.empty() || !data.eval_path.empty()) {
      throw ConfigError("data: give either synthetic or train_path/eval_path, not both");
    }
    const SyntheticTaskSpec& t = *data.synthetic;
    t.validate();
    if (t.vocab > encoder.vocab_size) throw ConfigError("data.synthetic.vocab exceeds encoder.vocab_size");
    if (t.seq_len > encoder.max_seq_len) throw ConfigError("data.synthetic.seq_len exceeds encoder.max_seq_len");
    if (t.n_classes != encoder.n_classes) throw ConfigError("data.synthetic.n_classes differs from encoder.n_classes");
  } else if (data.train_path.empty() || data.eval_path.empty()) {
    throw ConfigError("data: needs synthetic or both train_path and eval_path");
  }
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  for (double t : thresholds) {
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("thresholds must lie in [0, 1]");
  }
}

json to_json(const ExperimentConfig& c) {
  json data = json::object();
  if (c.data.synthetic) {
    data["synthetic"] = synthetic_json(*c.data.synthetic);
  } else {
    data["train_path"] = c.data.train_path;
    data["eval_path"] = c.data.eval_path;
  }
  return {
      {"encoder",
       {{"vocab_size", c.encoder.vocab_size}, {"d_model", c.encoder.d_model}, {"n_heads", c.encoder.n_heads},
        {"d_ff", c.encoder.d_ff}, {"n_layers", c.encoder.n_layers}, {"max_seq_len", c.encoder.max_seq_len},
        {"n_classes", c.encoder.n_classes}}},
      {"adapter",
       {{"variant", std::string(to_string(c.adapter.variant))}, {"r", c.adapter.r}, {"lora_alpha", c.adapter.lora_alpha},
        {"prefix_len", c.adapter.prefix_len}, {"gaussian_std", c.adapter.gaussian_std},
        {"zero_init_up", c.adapter.zero_init_up}, {"allow_wide", c.adapter.allow_wide}}},
      {"prune",
       {{"method", c.prune.method ? std::string(to_string(*c.prune.method)) : std::string("none")}, {"s", c.prune.s},
        {"seed", c.prune.seed}, {"snip_abs", c.prune.snip_abs}, {"score_batches", c.prune.score_batches},
        {"scope", scope_name(c.prune.scope)}}},
      {"optimizer",
       {{"beta1", c.optimizer.beta1}, {"beta2", c.optimizer.beta2}, {"eps", c.optimizer.eps},
        {"weight_decay", c.optimizer.weight_decay}, {"peak_lr", c.optimizer.peak_lr},
        {"warmup_fraction", c.optimizer.warmup_fraction}, {"epochs", c.optimizer.epochs},
        {"batch_size", c.optimizer.batch_size}, {"seed", c.optimizer.seed}, {"eval_every", c.optimizer.eval_every}}},
      {"data", data},
      {"output_dir", c.output_dir},
      {"seed", c.seed},
      {"thresholds", c.thresholds},
  };
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Section top(j, "");
  if (const json* e = top.child("encoder")) {
    Section s(*e, "encoder");
    s.get("vocab_size", c.encoder.vocab_size);
    s.get("d_model", c.encoder.d_model);
    s.get("n_heads", c.encoder.n_heads);
    s.get("d_ff", c.encoder.d_ff);
    s.get("n_layers", c.encoder.n_layers);
    s.get("max_seq_len", c.encoder.max_seq_len);
    s.get("n_classes", c.encoder.n_classes);
    s.finish();
  }
  if (const json* a = top.child("adapter")) {
    Section s(*a, "adapter");
    std::string variant(to_string(c.adapter.variant));
    s.get("variant", variant);
    c.adapter.variant = parse_name("adapter.variant", [&] { return parse_adapter_variant(variant); });
    s.get("r", c.adapter.r);
    s.get("lora_alpha", c.adapter.lora_alpha);
    s.get("prefix_len", c.adapter.prefix_len);
    s.get("gaussian_std", c.adapter.gaussian_std);
    s.get("zero_init_up", c.adapter.zero_init_up);
    s.get("allow_wide", c.adapter.allow_wide);
    s.finish();
  }
  if (const json* p = top.child("prune")) {
    Section s(*p, "prune");
    std::string method = "none";
    s.get("method", method);
    if (method != "none") c.prune.method = parse_name("prune.method", [&] { return parse_prune_method(method); });
    s.get("s", c.prune.s);
    s.get("seed", c.prune.seed);
    s.get("snip_abs", c.prune.snip_abs);
    s.get("score_batches", c.prune.score_batches);
    std::string scope = "global";
    s.get("scope", scope);
    if (scope == "global") {
      c.prune.scope = ThresholdScope::global;
    } else if (scope == "per_group") {
      c.prune.scope = ThresholdScope::per_group;
    } else {
      throw ConfigError("prune.scope: expected 'global' or 'per_group', got '" + scope + "'");
    }
    s.finish();
  }
  if (const json* o = top.child("optimizer")) {
    Section s(*o, "optimizer");
    s.get("beta1", c.optimizer.beta1);
    s.get("beta2", c.optimizer.beta2);
    s.get("eps", c.optimizer.eps);
    s.get("weight_decay", c.optimizer.weight_decay);
    s.get("peak_lr", c.optimizer.peak_lr);
    s.get("warmup_fraction", c.optimizer.warmup_fraction);
    s.get("epochs", c.optimizer.epochs);
    s.get("batch_size", c.optimizer.batch_size);
    s.get("seed", c.optimizer.seed);
    s.get("eval_every", c.optimizer.eval_every);
    s.finish();
  }
  if (const json* d = top.child("data")) {
    Section s(*d, "data");
    if (const json* syn = s.child("synthetic")) {
      Section t(*syn, "data.synthetic");
      SyntheticTaskSpec spec;
      std::string task(to_string(spec.task));
      t.get("task", task);
      spec.task = parse_synthetic_task(task);
      t.get("vocab", spec.vocab);
      t.get("seq_len", spec.seq_len);
      t.get("n_classes", spec.n_classes);
      t.get("n_train", spec.n_train);
      t.get("n_eval", spec.n_eval);
      t.get("noise_rate", spec.noise_rate);
      t.get("seed", spec.seed);
      t.finish();
      c.data.synthetic = spec;
    }
    s.get("train_path", c.data.train_path);
    s.get("eval_path", c.data.eval_path);
    s.finish();
  }
  top.get("output_dir", c.output_dir);
  top.get("seed", c.seed);
  top.get("thresholds", c.thresholds);
  top.finish();
  c.validate();
  return c;
}

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

std::string serialize_config(const ExperimentConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void save_config(const std::filesystem::path& path, const ExperimentConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config " + path.string());
  out << serialize_config(cfg);
}

}  // namespace sparseadapter
