#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "oracles.hpp"
#include "sparseadapter/adapters.hpp"
#include "sparseadapter/errors.hpp"

using namespace sparseadapter;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig c;
  c.vocab_size = 20;
  c.d_model = 16;
  c.n_heads = 4;
  c.d_ff = 24;
  c.n_layers = 2;
  c.max_seq_len = 8;
  c.n_classes = 4;
  return c;
}

TokenBatch random_batch(Rng& rng, std::size_t b, std::size_t t, std::size_t vocab, std::size_t classes) {
  TokenBatch batch{b, t, {}, {}};
  for (std::size_t i = 0; i < b * t; ++i) batch.tokens.push_back(static_cast<int>(rng.below(vocab)));
  for (std::size_t i = 0; i < b; ++i) batch.labels.push_back(static_cast<int>(rng.below(classes)));
  return batch;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("attention weights are d_model x d_model") {
  EncoderConfig c = tiny_config();
  c.d_model = 64;
  const Model m = build_encoder(c, 1);
  for (const char* p : {"q", "k", "v", "o"}) {
    CHECK(m.param(std::string("layer0.attn.") + p + ".weight").tensor.shape() == Shape{64, 64});
  }
  CHECK(m.param("embed.tok").tensor.shape() == Shape{c.vocab_size, 64});
  CHECK(m.param("head.weight").tensor.shape() == Shape{64, c.n_classes});
}

TEST_CASE("indivisible d_model is rejected") {
  EncoderConfig c = tiny_config();
  c.d_model = 63;
  c.n_heads = 4;
  CHECK_THROWS_AS(build_encoder(c, 0), ContractViolation);
}

TEST_CASE("same seed gives identical parameter bytes and names") {
  const Model a = build_encoder(tiny_config(), 7), b = build_encoder(tiny_config(), 7), c = build_encoder(tiny_config(), 8);
  REQUIRE(a.params().size() == b.params().size());
  std::set<std::string> names;
  bool any_diff = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    CHECK(a.params()[i].name == b.params()[i].name);
    CHECK(bitwise_equal(a.params()[i].tensor, b.params()[i].tensor));
    names.insert(a.params()[i].name);
    any_diff = any_diff || !bitwise_equal(a.params()[i].tensor, c.params()[i].tensor);
  }
  CHECK(names.size() == a.params().size());
  CHECK(any_diff);
}

TEST_CASE("logits have shape (batch, n_classes) and are pure") {
  Model m = build_encoder(tiny_config(), 3);
  freeze_backbone(m);
  Rng rng(1);
  const TokenBatch b = random_batch(rng, 2, 8, 20, 4);
  const Tensor l1 = predict_logits(m, b), l2 = predict_logits(m, b);
  CHECK(l1.shape() == Shape{2, 4});
  CHECK(bitwise_equal(l1, l2));
}

TEST_CASE("permuting the batch permutes logits rows") {
  Model m = build_encoder(tiny_config(), 4);
  AdapterSpec spec;
  spec.r = 4;
  insert_adapters(m, spec, 5);
  Rng rng(2);
  const TokenBatch b = random_batch(rng, 5, 6, 20, 4);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  TokenBatch p{5, 6, {}, {}};
  for (std::size_t i : perm) {
    p.tokens.insert(p.tokens.end(), b.tokens.begin() + static_cast<long>(i * 6), b.tokens.begin() + static_cast<long>((i + 1) * 6));
    p.labels.push_back(b.labels[i]);
  }
  const Tensor lb = predict_logits(m, b), lp = predict_logits(m, p);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t k = 0; k < 4; ++k) CHECK(lp[r * 4 + k] == doctest::Approx(lb[perm[r] * 4 + k]).epsilon(1e-12));
}

TEST_CASE("bad tokens and lengths are rejected") {
  const Model m = build_encoder(tiny_config(), 0);
  CHECK_THROWS_AS(predict_logits(m, TokenBatch{1, 2, {0, 20}, {0}}), ContractViolation);
  CHECK_THROWS_AS(predict_logits(m, TokenBatch{1, 9, std::vector<int>(9, 0), {0}}), ContractViolation);
  Tape tape;
  ParamBinder binder(tape, m, false);
  CHECK_THROWS_AS(classification_loss(m, binder, TokenBatch{1, 2, {0, 1}, {7}}), ContractViolation);
}

TEST_CASE("freeze leaves adapters and head trainable") {
  Model m = build_encoder(tiny_config(), 0);
  AdapterSpec spec;
  spec.r = 4;
  insert_adapters(m, spec, 1);
  freeze_backbone(m);
  for (const ParamGroup& g : m.params()) {
    CAPTURE(g.name);
    CHECK(g.trainable == (g.role != ParamRole::backbone));
  }
}

TEST_CASE("frozen groups get no gradient leaves") {
  Model m = build_encoder(tiny_config(), 0);
  AdapterSpec spec;
  spec.r = 4;
  insert_adapters(m, spec, 1);
  freeze_backbone(m);
  Rng rng(3);
  const TokenBatch b = random_batch(rng, 2, 4, 20, 4);
  Tape tape;
  ParamBinder binder(tape, m, true);
  const GradMap g = backward(classification_loss(m, binder, b));
  for (const ParamGroup& p : m.params()) CHECK(g.contains(p.name) == p.trainable);
}

TEST_CASE("logits stay finite on 1000 random batches") {
  Model m = build_encoder(tiny_config(), 11);
  insert_adapters(m, AdapterSpec{AdapterVariant::mam, 4, 16.0, 2}, 12);
  Rng rng(13);
  bool finite = true;
  for (int i = 0; i < 1000; ++i) {
    const TokenBatch b = random_batch(rng, 1 + rng.below(3), 1 + rng.below(8), 20, 4);
    finite = finite && predict_logits(m, b).all_finite();
  }
  CHECK(finite);
}

}  // TEST_SUITE
