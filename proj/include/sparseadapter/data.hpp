#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sparseadapter/model.hpp"

namespace sparseadapter {

struct Example {
  std::vector<int> tokens;
  int label = 0;
  friend bool operator==(const Example&, const Example&) = default;
};

// Fixed-length sequence classification data.
struct Dataset {
  std::vector<Example> examples;

  std::size_t size() const noexcept { return examples.size(); }
  bool empty() const noexcept { return examples.empty(); }
  std::size_t seq_len() const;
  std::size_t n_classes() const;
};

// One {"tokens": [...], "label": k} object per line. Throws FormatError with
// the line number on malformed input or ragged sequence lengths.
Dataset read_jsonl(std::istream& in);
Dataset load_jsonl(const std::filesystem::path& path);
void write_jsonl(std::ostream& out, const Dataset& data);
void save_jsonl(const std::filesystem::path& path, const Dataset& data);

// Batches in the given example order; the last batch may be short.
std::vector<TokenBatch> make_batches(const Dataset& data, std::size_t batch_size, std::span<const std::size_t> order);
std::vector<TokenBatch> make_batches(const Dataset& data, std::size_t batch_size);

enum class SyntheticTask { token_majority, keyed_lookup, parity_window };

std::string_view to_string(SyntheticTask t);
SyntheticTask parse_synthetic_task(std::string_view name);

struct SyntheticTaskSpec {
  SyntheticTask task = SyntheticTask::token_majority;
  std::size_t vocab = 256;  // tokens drawn from [0, vocab)
  std::size_t seq_len = 16;
  std::size_t n_classes = 4;
  std::size_t n_train = 512;
  std::size_t n_eval = 256;
  double noise_rate = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const SyntheticTaskSpec&, const SyntheticTaskSpec&) = default;
};

struct SplitData {
  Dataset train;
  Dataset eval;
};

// Deterministic in spec.seed. Train and eval never share a token sequence.
SplitData generate_synthetic(const SyntheticTaskSpec& spec);

}  // namespace sparseadapter
