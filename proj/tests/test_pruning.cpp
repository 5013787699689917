#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "sparseadapter/adapters.hpp"
#include "sparseadapter/errors.hpp"
#include "sparseadapter/ops.hpp"
#include "sparseadapter/pruning.hpp"

using namespace sparseadapter;

namespace {

Model adapted(std::size_t d, std::size_t layers, std::size_t r, std::uint64_t seed = 0) {
  EncoderConfig c;
  c.vocab_size = 12;
  c.d_model = d;
  c.n_heads = 4;
  c.d_ff = 16;
  c.n_layers = layers;
  c.max_seq_len = 6;
  Model m = build_encoder(c, seed);
  freeze_backbone(m);
  AdapterSpec spec;
  spec.r = r;
  spec.allow_wide = true;
  insert_adapters(m, spec, seed + 1);
  return m;
}

// A model holding only the given prunable groups.
Model bare(const std::map<std::string, Tensor>& groups) {
  Model m(EncoderConfig{});
  for (const auto& [name, t] : groups) {
    m.add_param(ParamGroup{name, t, true, true, t.rows(), t.cols(), ParamRole::adapter});
  }
  return m;
}

ScoreMap scores_of(std::map<std::string, Tensor> s) { return ScoreMap{PruneMethod::magnitude, std::move(s), {}}; }

TokenBatch batch_for(const Model& m, std::uint64_t seed) {
  Rng rng(seed);
  TokenBatch b{4, 5, {}, {}};
  for (int i = 0; i < 20; ++i) b.tokens.push_back(static_cast<int>(rng.below(m.config().vocab_size)));
  for (int i = 0; i < 4; ++i) b.labels.push_back(static_cast<int>(rng.below(m.config().n_classes)));
  return b;
}

}  // namespace

TEST_SUITE("pruning") {

TEST_CASE("kept count rounds half up") {
  CHECK(kept_count(0.4, 10000) == 6000);
  CHECK(kept_count(0.5, 5) == 3);
  CHECK(kept_count(0.0, 7) == 7);
  CHECK(kept_count(0.75, 2) == 1);
}

TEST_CASE("random scores are deterministic and uniform") {
  const Model m = adapted(64, 4, 128);
  const ScoreMap a = score_random(m, 5), b = score_random(m, 5);
  CHECK(a.scores == b.scores);
  std::vector<double> all;
  for (const auto& [name, t] : a.scores) all.insert(all.end(), t.data().begin(), t.data().end());
  REQUIRE(all.size() >= 100000);
  std::sort(all.begin(), all.end());
  const double n = static_cast<double>(all.size());
  double d = 0.0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    d = std::max({d, static_cast<double>(i + 1) / n - all[i], all[i] - static_cast<double>(i) / n});
  }
  CHECK(d < 1.628 / std::sqrt(n));  // Kolmogorov-Smirnov, alpha = 0.01
}

TEST_CASE("independent random masks overlap on about half the kept positions") {
  const Model m = adapted(16, 2, 8);
  const PruneMask a = prune_by_percentile(score_random(m, 1), 0.5, 1);
  const PruneMask b = prune_by_percentile(score_random(m, 2), 0.5, 2);
  std::size_t both = 0;
  for (const auto& [name, bits] : a.groups())
    for (std::size_t i = 0; i < bits.size(); ++i) both += bits[i] & b.bits(name)[i];
  const double kept = static_cast<double>(a.total_kept());
  CHECK(std::abs(static_cast<double>(both) - 0.5 * kept) < 4.0 * std::sqrt(kept * 0.25));
}

TEST_CASE("magnitude scores") {
  const Model m = bare({{"w", Tensor({1, 3}, {-3.0, 1.0, 2.0})}});
  const ScoreMap s = score_magnitude(m);
  CHECK(s.scores.at("w") == Tensor({1, 3}, {3.0, 1.0, 2.0}));
}

TEST_CASE("equal weights keep the tie-break half") {
  const Model m = bare({{"w", Tensor({2, 5}, 0.7)}});
  const PruneMask mask = prune_by_percentile(score_magnitude(m), 0.5, 0);
  CHECK(mask.bits("w") == PruneMask::Bits{1, 1, 1, 1, 1, 0, 0, 0, 0, 0});
}

TEST_CASE("magnitude mask is invariant to positive scaling") {
  Model m = adapted(16, 1, 4, 3);
  const PruneMask before = prune_by_percentile(score_magnitude(m), 0.6, 0);
  for (ParamGroup& g : m.params())
    if (g.prunable)
      for (double& x : g.tensor.data()) x *= 3.7;
  CHECK(prune_by_percentile(score_magnitude(m), 0.6, 0) == before);
}

TEST_CASE("snip on (w x - t)^2") {
  LossFn loss = [](Tape& tape, const std::map<std::string, Var>& p) {
    Var r = ops::add_scalar(ops::mul(p.at("w"), tape.constant(Tensor::from({1.0}))), -0.0);
    return ops::sum_all(ops::mul(r, r));
  };
  std::vector<LossFn> losses{loss};
  const ScoreMap s = snip_scores({{"w", Tensor::from({1.0})}}, losses);
  CHECK(s.raw.at("w")[0] == -2.0);
  CHECK(s.scores.at("w")[0] == 2.0);
  CHECK(gradient(loss, {{"w", Tensor::from({1.0})}}).at("w")[0] == 2.0);
  const ScoreMap a = snip_scores({{"w", Tensor::from({-1.0})}}, losses, true);
  CHECK(a.scores.at("w")[0] == 2.0);
}

TEST_CASE("snip scores only prunable groups and ignores batch duplication") {
  const Model m = adapted(16, 1, 4, 2);
  const TokenBatch b = batch_for(m, 1);
  const std::vector<TokenBatch> one{b}, two{b, b};
  const ScoreMap s1 = score_snip(m, one, cross_entropy_loss());
  const ScoreMap s2 = score_snip(m, two, cross_entropy_loss());
  std::size_t prunable = 0;
  for (const ParamGroup& g : m.params()) {
    prunable += g.prunable;
    CHECK(s1.scores.contains(g.name) == g.prunable);
  }
  CHECK(s1.scores.size() == prunable);
  for (const auto& [name, t] : s1.raw)
    for (std::size_t i = 0; i < t.numel(); ++i) CHECK(s2.raw.at(name)[i] == 2.0 * t[i]);
  CHECK(prune_by_percentile(s1, 0.5) == prune_by_percentile(s2, 0.5));
}

TEST_CASE("grasp on a quadratic") {
  const double a = 3.0, w = 2.0;
  LossFn loss = [a](Tape&, const std::map<std::string, Var>& p) {
    return ops::scale(ops::sum_all(ops::mul(p.at("w"), p.at("w"))), 0.5 * a);
  };
  std::vector<LossFn> losses{loss};
  const ScoreMap s = grasp_scores({{"w", Tensor::from({w})}}, losses);
  CHECK(s.raw.at("w")[0] == doctest::Approx(-a * a * w * w).epsilon(1e-14));
  CHECK(s.scores.at("w")[0] == doctest::Approx(a * a * w * w).epsilon(1e-14));
}

TEST_CASE("grasp on a linear loss falls back to the tie-break rule") {
  LossFn loss = [](Tape&, const std::map<std::string, Var>& p) { return ops::sum_all(ops::scale(p.at("w"), 2.0)); };
  std::vector<LossFn> losses{loss};
  const ScoreMap s = grasp_scores({{"w", Tensor({4}, {1.0, -2.0, 3.0, 0.5})}}, losses);
  for (double z : s.raw.at("w").data()) CHECK(z == 0.0);
  CHECK(prune_by_percentile(s, 0.5).bits("w") == PruneMask::Bits{1, 1, 0, 0});
}

TEST_CASE("grasp hessian-gradient product matches finite differences") {
  const Model m = adapted(8, 1, 2, 6);
  const TokenBatch b = batch_for(m, 2);
  const LossFn loss = oracle::model_loss(m, b);
  const GradMap w = prunable_weights(m);
  const GradMap g = gradient(loss, w);
  const GradMap h = hvp(loss, w, g);
  CHECK(oracle::normwise_rel_err(h, oracle::fd_hvp(loss, w, g, 1e-4)) < 1e-4);
  std::vector<LossFn> losses{loss};
  const ScoreMap s = grasp_scores(w, losses);
  for (const auto& [name, t] : s.scores)
    for (std::size_t i = 0; i < t.numel(); ++i) CHECK(t[i] == w.at(name)[i] * h.at(name)[i]);
}

TEST_CASE("er closed forms") {
  const std::vector<LayerShape> one{{4, 4}};
  CHECK(er_sparsities(one, 0.25)[0] == doctest::Approx(0.25).epsilon(1e-12));
  const std::vector<LayerShape> with_small{{2, 2}, {8, 8}};
  for (double s : {0.1, 0.3, 0.5}) CHECK(er_sparsities(with_small, s)[0] == 0.0);
}

TEST_CASE("er allocation matches an epsilon search") {
  const std::vector<LayerShape> shapes{{4, 4}, {8, 8}};
  const auto got = er_sparsities(shapes, 0.3);
  const auto ref = oracle::er_by_bisection({{4, 4}, {8, 8}}, 0.3);
  CHECK(got[1] > got[0]);
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(ref[i]).epsilon(1e-9));

  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<LayerShape> many;
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (int i = 0; i < 5; ++i) {
      const std::size_t a = 1 + rng.below(40), b = 1 + rng.below(40);
      many.push_back({a, b});
      pairs.emplace_back(a, b);
    }
    const double s = 0.9 * rng.uniform01();
    const auto g = er_sparsities(many, s);
    const auto r = oracle::er_by_bisection(pairs, s);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(r[i]).epsilon(1e-7));
  }
}

TEST_CASE("er masks") {
  const Model m = adapted(16, 2, 4, 1);
  const PruneMask zero = score_er(m, 0.0, 3);
  CHECK(zero.total_kept() == zero.total_size());
  const PruneMask mask = score_er(m, 0.5, 3);
  CHECK(mask == score_er(m, 0.5, 3));
  std::vector<LayerShape> shapes;
  std::vector<std::string> names;
  for (const ParamGroup& g : m.params())
    if (g.prunable) shapes.push_back({g.n_in, g.n_out}), names.push_back(g.name);
  const auto sg = er_sparsities(shapes, 0.5);
  for (std::size_t i = 0; i < names.size(); ++i) CHECK(mask.kept(names[i]) == kept_count(sg[i], mask.size(names[i])));
  CHECK(std::labs(static_cast<long>(mask.total_kept()) - static_cast<long>(kept_count(0.5, mask.total_size()))) <=
        static_cast<long>(names.size()));
}

TEST_CASE("percentile on the worked example") {
  const PruneMask m = prune_by_percentile(scores_of({{"z", Tensor({4}, {0.1, 0.5, 0.3, 0.9})}}), 0.5);
  CHECK(m.bits("z") == PruneMask::Bits{0, 1, 0, 1});
  CHECK(m.threshold() == 0.5);
  const PruneMask all = prune_by_percentile(scores_of({{"z", Tensor({4}, {0.1, 0.5, 0.3, 0.9})}}), 0.0);
  CHECK(all.total_kept() == 4);
}

TEST_CASE("all-equal scores keep the lowest (name, index) pairs") {
  const PruneMask m = prune_by_percentile(scores_of({{"b", Tensor({4}, 1.0)}, {"a", Tensor({6}, 1.0)}}), 0.5);
  CHECK(m.bits("a") == PruneMask::Bits{1, 1, 1, 1, 1, 0});
  CHECK(m.bits("b") == PruneMask::Bits{0, 0, 0, 0});
}

TEST_CASE("percentile matches a full sort with ties") {
  Rng rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    std::map<std::string, Tensor> scores;
    const std::size_t groups = 1 + rng.below(4);
    for (std::size_t g = 0; g < groups; ++g) {
      Tensor t({1 + rng.below(50)});
      for (double& x : t.data()) x = static_cast<double>(rng.below(6));  // heavy ties
      scores.emplace("g" + std::to_string(g), std::move(t));
    }
    const double s = rng.uniform01() * 0.95;
    const PruneMask mask = prune_by_percentile(scores_of(scores), s);
    CHECK(mask.groups() == oracle::sort_top_k(scores, kept_count(s, mask.total_size())));
  }
}

TEST_CASE("per-group scope keeps round((1 - s) n) in every group") {
  Rng rng(1);
  std::map<std::string, Tensor> scores;
  for (const char* n : {"a", "b"}) {
    Tensor t({37});
    for (double& x : t.data()) x = rng.uniform01() + (n[0] == 'a' ? 10.0 : 0.0);
    scores.emplace(n, std::move(t));
  }
  const PruneMask m = prune_by_percentile(scores_of(scores), 0.4, 0, ThresholdScope::per_group);
  CHECK(m.kept("a") == kept_count(0.4, 37));
  CHECK(m.kept("b") == kept_count(0.4, 37));
}

TEST_CASE("exact sparsity for every method") {
  const Model m = adapted(16, 2, 8, 4);
  const TokenBatch b = batch_for(m, 3);
  const std::vector<TokenBatch> batches{b};
  const std::vector<ScoreMap> scored{score_random(m, 1), score_magnitude(m), score_snip(m, batches, cross_entropy_loss()),
                                     score_grasp(m, batches, cross_entropy_loss())};
  for (double s : {0.0, 0.2, 0.4, 0.6, 0.8}) {
    for (const ScoreMap& sm : scored) {
      const PruneMask mask = prune_by_percentile(sm, s);
      CHECK(mask.total_kept() == kept_count(s, mask.total_size()));
    }
    const PruneMask er = score_er(m, s, 1);
    CHECK(std::labs(static_cast<long>(er.total_kept()) - static_cast<long>(kept_count(s, er.total_size()))) <=
          static_cast<long>(er.groups().size()));
  }
}

TEST_CASE("apply mask") {
  Model m = adapted(16, 1, 4, 5);
  const Model original = m;
  std::map<std::string, PruneMask::Bits> ones, zero_up;
  for (const ParamGroup& g : m.params()) {
    if (!g.prunable) continue;
    ones[g.name].assign(g.tensor.numel(), 1);
    zero_up[g.name].assign(g.tensor.numel(), g.name == "layer0.ffn.adapter.up" ? 0 : 1);
  }
  apply_mask(m, std::make_shared<PruneMask>(PruneMethod::random, 0.0, 0, 0.0, ones));
  for (std::size_t i = 0; i < m.params().size(); ++i) CHECK(bitwise_equal(m.params()[i].tensor, original.params()[i].tensor));

  apply_mask(m, std::make_shared<PruneMask>(PruneMethod::random, 0.0, 0, 0.0, zero_up));
  Rng rng(2);
  Tensor x({3, 16});
  for (double& v : x.data()) v = rng.normal(0.0, 1.0);
  CHECK(bitwise_equal(adapter_forward(m, "layer0.ffn.adapter", x), x));

  auto missing = ones;
  missing.erase(missing.begin());
  CHECK_THROWS_AS(apply_mask(m, std::make_shared<PruneMask>(PruneMethod::random, 0.0, 0, 0.0, missing)), ContractViolation);
  auto wrong = ones;
  wrong.begin()->second.push_back(1);
  CHECK_THROWS_AS(apply_mask(m, std::make_shared<PruneMask>(PruneMethod::random, 0.0, 0, 0.0, wrong)), ContractViolation);
}

}  // TEST_SUITE
