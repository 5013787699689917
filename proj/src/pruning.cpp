#include "sparseadapter/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "sparseadapter/errors.hpp"
#include "sparseadapter/ops.hpp"
#include "sparseadapter/rng.hpp"

namespace sparseadapter {

std::string_view to_string(PruneMethod m) {
  switch (m) {
    case PruneMethod::random: return "random";
    case PruneMethod::magnitude: return "magnitude";
    case PruneMethod::er: return "er";
    case PruneMethod::snip: return "snip";
    case PruneMethod::grasp: return "grasp";
  }
  return "unknown";
}

PruneMethod parse_prune_method(std::string_view name) {
  for (auto m : {PruneMethod::random, PruneMethod::magnitude, PruneMethod::er, PruneMethod::snip, PruneMethod::grasp}) {
    if (to_string(m) == name) return m;
  }
  throw ContractViolation("unknown prune method '" + std::string(name) + "'");
}

PruneMask::PruneMask(PruneMethod method, double sparsity, std::uint64_t seed, double threshold,
                     std::map<std::string, Bits> groups)
    : method_(method), sparsity_(sparsity), seed_(seed), threshold_(threshold), groups_(std::move(groups)) {
  for (const auto& [name, bits] : groups_) {
    total_size_ += bits.size();
    for (std::uint8_t b : bits) {
      if (b > 1) throw ContractViolation("mask group '" + name + "' holds a non-binary value");
      total_kept_ += b;
    }
  }
}

const PruneMask::Bits& PruneMask::bits(const std::string& name) const {
  auto it = groups_.find(name);
  if (it == groups_.end()) throw ContractViolation("mask has no group '" + name + "'");
  return it->second;
}

std::size_t PruneMask::kept(const std::string& name) const {
  const Bits& b = bits(name);
  return static_cast<std::size_t>(std::count(b.begin(), b.end(), std::uint8_t{1}));
}

double PruneMask::achieved_sparsity() const noexcept {
  if (total_size_ == 0) return 0.0;
  return 1.0 - static_cast<double>(total_kept_) / static_cast<double>(total_size_);
}

bool operator==(const PruneMask& a, const PruneMask& b) {
  return a.method_ == b.method_ && a.sparsity_ == b.sparsity_ && a.seed_ == b.seed_ && a.groups_ == b.groups_;
}

std::size_t kept_count(double s, std::size_t n) {
  return static_cast<std::size_t>(std::floor((1.0 - s) * static_cast<double>(n) + 0.5));
}

namespace {

void check_sparsity(double s) {
  if (!(s >= 0.0 && s < 1.0)) throw ContractViolation("sparsity " + std::to_string(s) + " outside [0, 1)");
}

void require_prunable(const Model& model) {
  for (const ParamGroup& g : model.params())
    if (g.prunable) return;
  throw ContractViolation("model has no prunable parameter groups");
}

std::map<std::string, Tensor> canonical_product(const GradMap& weights, const GradMap& other, bool use_abs) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, w] : weights) {
    const Tensor& o = other.at(name);
    Tensor z(w.shape());
    for (std::size_t i = 0; i < w.numel(); ++i) {
      const double p = w[i] * o[i];
      z[i] = use_abs ? std::abs(p) : p;
    }
    out.emplace(name, std::move(z));
  }
  return out;
}

std::map<std::string, Tensor> negated(const std::map<std::string, Tensor>& scores) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, z] : scores) {
    Tensor n(z.shape());
    for (std::size_t i = 0; i < z.numel(); ++i) n[i] = -z[i];
    out.emplace(name, std::move(n));
  }
  return out;
}

void accumulate(GradMap& into, const GradMap& add) {
  for (const auto& [name, g] : add) {
    auto [it, inserted] = into.try_emplace(name, g);
    if (!inserted) {
      for (std::size_t i = 0; i < g.numel(); ++i) it->second[i] += g[i];
    }
  }
}

void require_finite(const std::map<std::string, Tensor>& m, const char* what) {
  for (const auto& [name, t] : m) {
    if (!t.all_finite()) throw NumericFailure(what, "group '" + name + "'");
  }
}

GradMap summed_gradient(const GradMap& weights, std::span<const LossFn> losses) {
  if (losses.empty()) throw ContractViolation("scoring requires at least one batch");
  GradMap g;
  for (const LossFn& fn : losses) accumulate(g, gradient(fn, weights));
  require_finite(g, "gradient");
  return g;
}

std::vector<LossFn> batch_losses(const Model& model, std::span<const TokenBatch> batches, const BatchLossFn& loss_fn) {
  std::vector<LossFn> out;
  for (const TokenBatch& batch : batches) {
    out.push_back([&model, &batch, &loss_fn](Tape& tape, const std::map<std::string, Var>& leaves) {
      ParamBinder binder(tape, model, false, leaves);
      return loss_fn(model, binder, batch);
    });
  }
  return out;
}

}  // namespace

BatchLossFn cross_entropy_loss() {
  return [](const Model& model, ParamBinder& params, const TokenBatch& batch) {
    return classification_loss(model, params, batch);
  };
}

GradMap prunable_weights(const Model& model) {
  GradMap out;
  for (const ParamGroup& g : model.params())
    if (g.prunable) out.emplace(g.name, g.tensor);
  return out;
}

ScoreMap score_random(const Model& model, std::uint64_t seed) {
  require_prunable(model);
  ScoreMap out{PruneMethod::random, {}, {}};
  std::uint64_t stream = 0;
  for (const auto& [name, w] : prunable_weights(model)) {
    Rng rng = Rng::derive(seed, stream++);
    Tensor z(w.shape());
    for (double& v : z.data()) v = rng.uniform01();
    out.scores.emplace(name, std::move(z));
  }
  return out;
}

ScoreMap score_magnitude(const Model& model) {
  require_prunable(model);
  ScoreMap out{PruneMethod::magnitude, {}, {}};
  for (const auto& [name, w] : prunable_weights(model)) {
    Tensor z(w.shape());
    for (std::size_t i = 0; i < w.numel(); ++i) z[i] = std::abs(w[i]);
    out.scores.emplace(name, std::move(z));
  }
  return out;
}

ScoreMap snip_scores(const GradMap& weights, std::span<const LossFn> losses, bool use_abs) {
  GradMap g = summed_gradient(weights, losses);
  ScoreMap out{PruneMethod::snip, canonical_product(weights, g, use_abs), {}};
  out.raw = negated(canonical_product(weights, g, false));
  require_finite(out.scores, "snip");
  return out;
}

ScoreMap grasp_scores(const GradMap& weights, std::span<const LossFn> losses) {
  GradMap g = summed_gradient(weights, losses);
  GradMap h;
  for (const LossFn& fn : losses) accumulate(h, hvp(fn, weights, g));
  require_finite(h, "hessian-gradient product");
  ScoreMap out{PruneMethod::grasp, canonical_product(weights, h, false), {}};
  out.raw = negated(out.scores);
  return out;
}

ScoreMap score_snip(const Model& model, std::span<const TokenBatch> batches, const BatchLossFn& loss_fn, bool use_abs) {
  require_prunable(model);
  std::vector<LossFn> losses = batch_losses(model, batches, loss_fn);
  return snip_scores(prunable_weights(model), losses, use_abs);
}

ScoreMap score_grasp(const Model& model, std::span<const TokenBatch> batches, const BatchLossFn& loss_fn) {
  require_prunable(model);
  std::vector<LossFn> losses = batch_losses(model, batches, loss_fn);
  return grasp_scores(prunable_weights(model), losses);
}

std::vector<double> er_sparsities(std::span<const LayerShape> groups, double s_global) {
  check_sparsity(s_global);
  const std::size_t n_groups = groups.size();
  std::vector<double> factor(n_groups), size(n_groups), cap(n_groups);
  double total = 0.0;
  for (std::size_t i = 0; i < n_groups; ++i) {
    const auto& g = groups[i];
    if (g.n_in < 1 || g.n_out < 1) throw ContractViolation("er_sparsities: n_in and n_out must be >= 1");
    size[i] = static_cast<double>(g.n_in) * static_cast<double>(g.n_out);
    factor[i] = std::max(0.0, 1.0 - static_cast<double>(g.n_in + g.n_out) / size[i]);
    cap[i] = 1.0 - 1.0 / size[i];  // keep at least one connection per group
    total += size[i];
  }
  const double target_pruned = total - static_cast<double>(kept_count(s_global, static_cast<std::size_t>(total)));

  std::vector<double> out(n_groups, 0.0);
  std::vector<char> clamped(n_groups, 0);
  while (true) {
    double fixed = 0.0, weight = 0.0;
    for (std::size_t i = 0; i < n_groups; ++i) {
      if (clamped[i]) fixed += cap[i] * size[i];
      else weight += factor[i] * size[i];
    }
    const double remaining = target_pruned - fixed;
    if (remaining <= 0.0) {
      for (std::size_t i = 0; i < n_groups; ++i) out[i] = clamped[i] ? cap[i] : 0.0;
      break;
    }
    if (weight <= 0.0) {
      throw ContractViolation("er_sparsities: s_global=" + std::to_string(s_global) +
                              " is infeasible under per-group clamping");
    }
    const double eps = remaining / weight;
    bool newly_clamped = false;
    for (std::size_t i = 0; i < n_groups; ++i) {
      if (!clamped[i] && eps * factor[i] > cap[i]) {
        clamped[i] = 1;
        newly_clamped = true;
      }
    }
    if (!newly_clamped) {
      for (std::size_t i = 0; i < n_groups; ++i) out[i] = clamped[i] ? cap[i] : eps * factor[i];
      break;
    }
  }
  return out;
}

PruneMask score_er(const Model& model, double s_global, std::uint64_t seed) {
  require_prunable(model);
  check_sparsity(s_global);
  GradMap weights = prunable_weights(model);
  std::vector<LayerShape> shapes;
  std::vector<std::string> names;
  for (const auto& [name, w] : weights) {
    const ParamGroup& g = model.param(name);
    shapes.push_back({g.n_in, g.n_out});
    names.push_back(name);
  }
  std::vector<double> sparsity = er_sparsities(shapes, s_global);
  std::map<std::string, PruneMask::Bits> groups;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const std::size_t n = weights.at(names[i]).numel();
    const std::size_t keep = kept_count(sparsity[i], n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = Rng::derive(seed, i);
    rng.shuffle(order);
    PruneMask::Bits bits(n, 0);
    for (std::size_t j = 0; j < keep; ++j) bits[order[j]] = 1;
    groups.emplace(names[i], std::move(bits));
  }
  return PruneMask(PruneMethod::er, s_global, seed, std::numeric_limits<double>::quiet_NaN(), std::move(groups));
}

namespace {

// Marks the `keep` highest of `values` (ties to the lower index); returns the
// lowest kept score, or +inf when nothing is kept.
double select_top(std::span<const double> values, std::size_t keep, std::span<std::uint8_t> bits) {
  if (keep == 0) return std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto better = [&](std::size_t a, std::size_t b) { return values[a] > values[b] || (values[a] == values[b] && a < b); };
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep - 1), order.end(), better);
  double threshold = values[order[keep - 1]];
  for (std::size_t i = 0; i < keep; ++i) {
    bits[order[i]] = 1;
    threshold = std::min(threshold, values[order[i]]);
  }
  return threshold;
}

}  // namespace

PruneMask prune_by_percentile(const ScoreMap& scores, double s, std::uint64_t seed, ThresholdScope scope) {
  check_sparsity(s);
  if (scores.scores.empty()) throw ContractViolation("prune_by_percentile: empty score map");
  require_finite(scores.scores, "score");

  std::map<std::string, PruneMask::Bits> groups;
  double threshold = std::numeric_limits<double>::infinity();
  if (scope == ThresholdScope::global) {
    // std::map iteration is name order, so the flat index encodes (name, index).
    std::vector<double> flat;
    for (const auto& [name, z] : scores.scores) flat.insert(flat.end(), z.data().begin(), z.data().end());
    std::vector<std::uint8_t> bits(flat.size(), 0);
    threshold = select_top(flat, kept_count(s, flat.size()), bits);
    std::size_t offset = 0;
    for (const auto& [name, z] : scores.scores) {
      groups.emplace(name, PruneMask::Bits(bits.begin() + static_cast<std::ptrdiff_t>(offset),
                                           bits.begin() + static_cast<std::ptrdiff_t>(offset + z.numel())));
      offset += z.numel();
    }
  } else {
    for (const auto& [name, z] : scores.scores) {
      PruneMask::Bits bits(z.numel(), 0);
      threshold = std::min(threshold, select_top(z.data(), kept_count(s, z.numel()), bits));
      groups.emplace(name, std::move(bits));
    }
  }
  return PruneMask(scores.method, s, seed, threshold, std::move(groups));
}

void apply_mask(Model& model, std::shared_ptr<const PruneMask> mask) {
  if (!mask) throw ContractViolation("apply_mask: null mask");
  std::size_t prunable = 0;
  for (const ParamGroup& g : model.params()) {
    if (!g.prunable) continue;
    ++prunable;
    if (!mask->contains(g.name)) throw ContractViolation("apply_mask: mask lacks prunable group '" + g.name + "'");
    if (mask->size(g.name) != g.tensor.numel()) {
      throw ContractViolation("apply_mask: group '" + g.name + "' has " + std::to_string(g.tensor.numel()) +
                              " elements, mask has " + std::to_string(mask->size(g.name)));
    }
  }
  if (prunable != mask->groups().size()) {
    for (const auto& [name, bits] : mask->groups()) {
      if (!model.has_param(name) || !model.param(name).prunable) {
        throw ContractViolation("apply_mask: mask group '" + name + "' is not a prunable group of the model");
      }
    }
  }
  for (ParamGroup& g : model.params()) {
    if (!g.prunable) continue;
    const auto& bits = mask->bits(g.name);
    for (std::size_t i = 0; i < bits.size(); ++i)
      if (!bits[i]) g.tensor[i] = 0.0;
  }
  model.set_mask(std::move(mask));
}

}  // namespace sparseadapter
