#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sparseadapter/autodiff.hpp"
#include "sparseadapter/model.hpp"

namespace sparseadapter {

enum class PruneMethod : std::uint8_t { random = 0, magnitude = 1, er = 2, snip = 3, grasp = 4 };

std::string_view to_string(PruneMethod m);
PruneMethod parse_prune_method(std::string_view name);

// Importance scores, canonical orientation: higher = kept.
struct ScoreMap {
  PruneMethod method = PruneMethod::random;
  std::map<std::string, Tensor> scores;
  // Uncanonicalized SNIP/GraSP scores (-w*g, -w*h); empty for other methods.
  std::map<std::string, Tensor> raw;
};

// Binary keep-mask per prunable group (1 = kept). Immutable once built.
class PruneMask {
 public:
  using Bits = std::vector<std::uint8_t>;

  PruneMask(PruneMethod method, double sparsity, std::uint64_t seed, double threshold, std::map<std::string, Bits> groups);

  PruneMethod method() const noexcept { return method_; }
  double sparsity() const noexcept { return sparsity_; }
  std::uint64_t seed() const noexcept { return seed_; }
  // Lowest kept score (the percentile threshold z_s); NaN for ER and for masks read from disk.
  double threshold() const noexcept { return threshold_; }

  const std::map<std::string, Bits>& groups() const noexcept { return groups_; }
  bool contains(const std::string& name) const { return groups_.contains(name); }
  const Bits& bits(const std::string& name) const;
  std::size_t kept(const std::string& name) const;
  std::size_t size(const std::string& name) const { return bits(name).size(); }
  std::size_t total_kept() const noexcept { return total_kept_; }
  std::size_t total_size() const noexcept { return total_size_; }
  double achieved_sparsity() const noexcept;

  // Compares method, sparsity, seed and bits; the threshold is diagnostic only.
  friend bool operator==(const PruneMask& a, const PruneMask& b);

 private:
  PruneMethod method_;
  double sparsity_;
  std::uint64_t seed_;
  double threshold_;
  std::map<std::string, Bits> groups_;
  std::size_t total_kept_ = 0;
  std::size_t total_size_ = 0;
};

// round((1 - s) * n), half-up.
std::size_t kept_count(double s, std::size_t n);

// Per-batch loss used by SNIP/GraSP on a model.
using BatchLossFn = std::function<Var(const Model&, ParamBinder&, const TokenBatch&)>;
BatchLossFn cross_entropy_loss();

ScoreMap score_random(const Model& model, std::uint64_t seed);
ScoreMap score_magnitude(const Model& model);

// Scores over an arbitrary set of weights and per-batch losses (gradients summed).
ScoreMap snip_scores(const GradMap& weights, std::span<const LossFn> losses, bool use_abs = false);
ScoreMap grasp_scores(const GradMap& weights, std::span<const LossFn> losses);

ScoreMap score_snip(const Model& model, std::span<const TokenBatch> batches, const BatchLossFn& loss_fn,
                    bool use_abs = false);
ScoreMap score_grasp(const Model& model, std::span<const TokenBatch> batches, const BatchLossFn& loss_fn);

struct LayerShape {
  std::size_t n_in = 0;
  std::size_t n_out = 0;
};

// Erdős–Rényi per-group sparsities: s_g = eps * (1 - (n_in + n_out) / (n_in * n_out)),
// eps chosen so the total kept count hits round((1 - s_global) * N), clamped groups
// fixed and eps re-solved over the rest until no new group clamps.
std::vector<double> er_sparsities(std::span<const LayerShape> groups, double s_global);

PruneMask score_er(const Model& model, double s_global, std::uint64_t seed);

enum class ThresholdScope { global, per_group };

// Keeps the top round((1 - s) * N) scores; ties go to ascending (group name, index).
PruneMask prune_by_percentile(const ScoreMap& scores, double s, std::uint64_t seed = 0,
                              ThresholdScope scope = ThresholdScope::global);

// Zeroes masked weights and registers the mask so optimizer steps keep them zero.
void apply_mask(Model& model, std::shared_ptr<const PruneMask> mask);

// Prunable groups of a model, by name.
GradMap prunable_weights(const Model& model);

}  // namespace sparseadapter
