#include "sparseadapter/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "sparseadapter/errors.hpp"
#include "sparseadapter/rng.hpp"

namespace sparseadapter {

std::size_t Dataset::seq_len() const { return examples.empty() ? 0 : examples.front().tokens.size(); }

std::size_t Dataset::n_classes() const {
  int mx = -1;
  for (const Example& e : examples) mx = std::max(mx, e.label);
  return static_cast<std::size_t>(mx + 1);
}

Dataset read_jsonl(std::istream& in) {
  Dataset data;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Example ex;
    try {
      const auto j = nlohmann::json::parse(line);
      for (const auto& [key, value] : j.items()) {
        if (key != "tokens" && key != "label") throw FormatError("unknown key '" + key + "'");
      }
      ex.tokens = j.at("tokens").get<std::vector<int>>();
      ex.label = j.at("label").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("dataset line " + std::to_string(lineno) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
    if (ex.tokens.empty()) throw FormatError("dataset line " + std::to_string(lineno) + ": empty token list");
    if (ex.label < 0) throw FormatError("dataset line " + std::to_string(lineno) + ": negative label");
    if (std::any_of(ex.tokens.begin(), ex.tokens.end(), [](int t) { return t < 0; })) {
      throw FormatError("dataset line " + std::to_string(lineno) + ": negative token id");
    }
    if (!data.examples.empty() && ex.tokens.size() != data.seq_len()) {
      throw FormatError("dataset line " + std::to_string(lineno) + ": sequence length " +
                        std::to_string(ex.tokens.size()) + " differs from " + std::to_string(data.seq_len()));
    }
    data.examples.push_back(std::move(ex));
  }
  return data;
}

Dataset load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open dataset " + path.string());
  return read_jsonl(in);
}

void write_jsonl(std::ostream& out, const Dataset& data) {
  for (const Example& e : data.examples) {
    out << nlohmann::json{{"tokens", e.tokens}, {"label", e.label}}.dump() << '\n';
  }
}

void save_jsonl(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write dataset " + path.string());
  write_jsonl(out, data);
}

std::vector<TokenBatch> make_batches(const Dataset& data, std::size_t batch_size, std::span<const std::size_t> order) {
  if (batch_size == 0) throw ContractViolation("make_batches: batch_size must be >= 1");
  const std::size_t T = data.seq_len();
  std::vector<TokenBatch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, order.size() - start);
    TokenBatch b{n, T, {}, {}};
    b.tokens.reserve(n * T);
    for (std::size_t i = 0; i < n; ++i) {
      const Example& e = data.examples.at(order[start + i]);
      b.tokens.insert(b.tokens.end(), e.tokens.begin(), e.tokens.end());
      b.labels.push_back(e.label);
    }
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<TokenBatch> make_batches(const Dataset& data, std::size_t batch_size) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  return make_batches(data, batch_size, order);
}

std::string_view to_string(SyntheticTask t) {
  switch (t) {
    case SyntheticTask::token_majority: return "token_majority";
    case SyntheticTask::keyed_lookup: return "keyed_lookup";
    case SyntheticTask::parity_window: return "parity_window";
  }
  return "unknown";
}

SyntheticTask parse_synthetic_task(std::string_view name) {
  for (auto t : {SyntheticTask::token_majority, SyntheticTask::keyed_lookup, SyntheticTask::parity_window}) {
    if (to_string(t) == name) return t;
  }
  throw ConfigError("unknown synthetic task '" + std::string(name) + "'");
}

void SyntheticTaskSpec::validate() const {
  if (n_classes < 2) throw ConfigError("synthetic task: n_classes must be >= 2");
  if (vocab < 2 * n_classes) throw ConfigError("synthetic task: vocab must be >= 2 * n_classes");
  if (seq_len < 2) throw ConfigError("synthetic task: seq_len must be >= 2");
  if (n_train < 1 || n_eval < 1) throw ConfigError("synthetic task: n_train and n_eval must be >= 1");
  if (!(noise_rate >= 0.0 && noise_rate < 1.0)) throw ConfigError("synthetic task: noise_rate must be in [0, 1)");
}

namespace {

// Fraction of positions drawn from the label's own token class in token_majority.
constexpr double kMajorityBoost = 0.2;
constexpr std::size_t kParityWindow = 4;

int token_class(int token, std::size_t n_classes) { return token % static_cast<int>(n_classes); }

class Generator {
 public:
  explicit Generator(const SyntheticTaskSpec& spec) : spec_(spec), rng_(Rng::derive(spec.seed, 0x5EED)) {
    // keyed_lookup: the top quarter of the vocabulary are key tokens, each
    // assigned a class by a seeded, balanced lookup table.
    n_keys_ = std::max(spec.n_classes, spec.vocab / 4);
    lookup_.resize(n_keys_);
    for (std::size_t i = 0; i < n_keys_; ++i) lookup_[i] = static_cast<int>(i % spec.n_classes);
    Rng table_rng = Rng::derive(spec.seed, 0x7AB1E);
    table_rng.shuffle(lookup_);
  }

  Example next() {
    switch (spec_.task) {
      case SyntheticTask::token_majority: return majority();
      case SyntheticTask::keyed_lookup: return lookup();
      case SyntheticTask::parity_window: return parity();
    }
    throw ContractViolation("unreachable synthetic task");
  }

  int noisy(int label) {
    if (spec_.noise_rate > 0.0 && rng_.uniform01() < spec_.noise_rate) {
      int other = static_cast<int>(rng_.below(spec_.n_classes - 1));
      return other >= label ? other + 1 : other;
    }
    return label;
  }

 private:
  int uniform_token() { return static_cast<int>(rng_.below(spec_.vocab)); }

  int token_of_class(int c) {
    const std::size_t per_class = (spec_.vocab - static_cast<std::size_t>(c) + spec_.n_classes - 1) / spec_.n_classes;
    return c + static_cast<int>(spec_.n_classes * rng_.below(per_class));
  }

  Example majority() {
    const std::size_t C = spec_.n_classes;
    while (true) {
      const int target = static_cast<int>(rng_.below(C));
      Example e;
      std::vector<std::size_t> counts(C, 0);
      for (std::size_t i = 0; i < spec_.seq_len; ++i) {
        const int t = rng_.uniform01() < kMajorityBoost ? token_of_class(target) : uniform_token();
        e.tokens.push_back(t);
        ++counts[static_cast<std::size_t>(token_class(t, C))];
      }
      const auto top = std::max_element(counts.begin(), counts.end());
      if (std::count(counts.begin(), counts.end(), *top) > 1) continue;  // no strict majority
      e.label = static_cast<int>(top - counts.begin());
      return e;
    }
  }

  Example lookup() {
    const std::size_t first_key = spec_.vocab - n_keys_;
    Example e;
    for (std::size_t i = 0; i < spec_.seq_len; ++i) e.tokens.push_back(static_cast<int>(rng_.below(first_key)));
    const std::size_t key = rng_.below(n_keys_);
    e.tokens[rng_.below(spec_.seq_len)] = static_cast<int>(first_key + key);
    e.label = lookup_[key];
    return e;
  }

  Example parity() {
    Example e;
    std::size_t odd = 0;
    for (std::size_t i = 0; i < spec_.seq_len; ++i) {
      const int t = uniform_token();
      e.tokens.push_back(t);
      if (i < kParityWindow && (t & 1)) ++odd;
    }
    e.label = static_cast<int>(odd % spec_.n_classes);
    return e;
  }

  const SyntheticTaskSpec& spec_;
  Rng rng_;
  std::size_t n_keys_ = 0;
  std::vector<int> lookup_;
};

}  // namespace

SplitData generate_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();
  Generator gen(spec);
  std::set<std::vector<int>> seen;
  SplitData out;
  const std::size_t max_attempts = 100 * (spec.n_train + spec.n_eval);
  std::size_t attempts = 0;
  auto fill = [&](Dataset& ds, std::size_t n) {
    while (ds.size() < n) {
      if (++attempts > max_attempts) {
        throw ConfigError("synthetic task: cannot draw enough distinct sequences; enlarge vocab or seq_len");
      }
      Example e = gen.next();
      if (!seen.insert(e.tokens).second) continue;
      e.label = gen.noisy(e.label);
      ds.examples.push_back(std::move(e));
    }
  };
  fill(out.train, spec.n_train);
  fill(out.eval, spec.n_eval);
  return out;
}

}  // namespace sparseadapter
