#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "sparseadapter/errors.hpp"
#include "sparseadapter/ops.hpp"

using namespace sparseadapter;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double std = 1.0) {
  Tensor t(std::move(shape));
  for (double& x : t.data()) x = rng.normal(0.0, std);
  return t;
}

// Gradient of sum(f(x) * w) for a fixed random weighting w, tape vs central differences.
template <class F>
double unary_grad_err(F f, Tensor x, std::uint64_t seed) {
  Rng rng(seed);
  Shape out_shape;
  {
    Tape probe;
    out_shape = f(probe.constant(x)).shape();
  }
  const Tensor w = random_tensor(out_shape, rng);
  LossFn loss = [&](Tape& tape, const std::map<std::string, Var>& p) {
    return ops::sum_all(ops::mul(f(p.at("x")), tape.constant(w)));
  };
  GradMap params{{"x", std::move(x)}};
  return oracle::normwise_rel_err(gradient(loss, params), oracle::fd_gradient(loss, params, 1e-6));
}

}  // namespace

TEST_SUITE("autodiff") {

TEST_CASE("product rule on scalars") {
  Tape tape;
  Var x = tape.leaf(Tensor::from({3.0}), true, "x");
  Var y = tape.leaf(Tensor::from({4.0}), true, "y");
  GradMap g = backward(ops::mul(x, y));
  CHECK(g.at("x")[0] == 4.0);
  CHECK(g.at("y")[0] == 3.0);
}

TEST_CASE("unused input gets explicit zeros") {
  Tape tape;
  Var x = tape.leaf(Tensor::from({1.0, 2.0}), true, "x");
  Var z = tape.leaf(Tensor::from({5.0, 6.0}), true, "z");
  GradMap g = backward(ops::sum_all(ops::exp(x)));
  REQUIRE(g.contains("z"));
  CHECK(g.at("z")[0] == 0.0);
  CHECK(g.at("z")[1] == 0.0);
  CHECK(g.at("x")[1] == doctest::Approx(std::exp(2.0)));
  (void)z;
}

TEST_CASE("non-scalar loss is rejected") {
  Tape tape;
  Var x = tape.leaf(Tensor::from({1.0, 2.0}), true, "x");
  CHECK_THROWS_AS(backward(ops::exp(x)), ContractViolation);
}

TEST_CASE("NaN is reported with the op name") {
  Tape tape;
  Var x = tape.leaf(Tensor::from({-1.0}), true, "x");
  try {
    ops::log(x);
    FAIL("expected NumericFailure");
  } catch (const NumericFailure& e) {
    CHECK(e.op() == "log");
  }
}

TEST_CASE("no-grad guard records constants") {
  Tape tape;
  Var x = tape.leaf(Tensor::from({1.0}), true, "x");
  NoGradGuard guard(tape);
  CHECK_FALSE(ops::exp(x).requires_grad());
}

TEST_CASE("matmul gradients in all transpose modes") {
  Rng rng(11);
  for (int ta = 0; ta < 2; ++ta) {
    for (int tb = 0; tb < 2; ++tb) {
      const Tensor a = random_tensor(ta ? Shape{4, 3} : Shape{3, 4}, rng);
      const Tensor b = random_tensor(tb ? Shape{5, 4} : Shape{4, 5}, rng);
      const Tensor w = random_tensor({3, 5}, rng);
      LossFn loss = [&](Tape& tape, const std::map<std::string, Var>& p) {
        return ops::sum_all(ops::mul(ops::matmul(p.at("a"), p.at("b"), ta, tb), tape.constant(w)));
      };
      GradMap params{{"a", a}, {"b", b}};
      CHECK(oracle::normwise_rel_err(gradient(loss, params), oracle::fd_gradient(loss, params, 1e-6)) < 1e-8);
    }
  }
}

TEST_CASE("matmul value matches a triple loop") {
  Rng rng(3);
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  Tape tape;
  const Tensor c = ops::matmul(tape.constant(a), tape.constant(b)).value();
  const auto ref = oracle::matmul(std::vector<double>(a.data().begin(), a.data().end()),
                                  std::vector<double>(b.data().begin(), b.data().end()), 3, 4, 2);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-14));
}

TEST_CASE("elementwise op gradients match finite differences") {
  Rng rng(5);
  const Tensor x = random_tensor({3, 4}, rng);
  Tensor pos = x;
  for (double& v : pos.data()) v = std::abs(v) + 0.5;
  CHECK(unary_grad_err([](Var v) { return ops::exp(v); }, x, 1) < 1e-8);
  CHECK(unary_grad_err([](Var v) { return ops::tanh(v); }, x, 2) < 1e-8);
  CHECK(unary_grad_err([](Var v) { return ops::gelu(v); }, x, 3) < 1e-8);
  CHECK(unary_grad_err([](Var v) { return ops::gelu_grad(v); }, x, 31) < 1e-8);
  CHECK(unary_grad_err([](Var v) { return ops::log(v); }, pos, 4) < 1e-8);
  CHECK(unary_grad_err([](Var v) { return ops::pow_scalar(v, 1.5); }, pos, 5) < 1e-8);
  CHECK(unary_grad_err([](Var v) { return ops::softmax_last(v); }, x, 6) < 1e-8);
  CHECK(unary_grad_err([](Var v) { return ops::row_mean(v); }, x, 7) < 1e-8);
  CHECK(unary_grad_err([](Var v) { return ops::mul(v, v); }, x, 8) < 1e-8);
  CHECK(unary_grad_err([](Var v) { return ops::scale(ops::add_scalar(v, 2.0), -3.0); }, x, 9) < 1e-8);
}

TEST_CASE("layer norm gradient") {
  Rng rng(7);
  const Tensor x = random_tensor({4, 6}, rng), gamma = random_tensor({6}, rng), beta = random_tensor({6}, rng);
  const Tensor w = random_tensor({4, 6}, rng);
  LossFn loss = [&](Tape& tape, const std::map<std::string, Var>& p) {
    return ops::sum_all(ops::mul(ops::layer_norm(p.at("x"), p.at("g"), p.at("b")), tape.constant(w)));
  };
  GradMap params{{"x", x}, {"g", gamma}, {"b", beta}};
  CHECK(oracle::normwise_rel_err(gradient(loss, params), oracle::fd_gradient(loss, params, 1e-6)) < 1e-7);
}

TEST_CASE("gelu value and derivatives") {
  for (double x : {-3.0, -0.7, 0.0, 0.4, 2.5}) {
    Tape tape;
    Var v = tape.leaf(Tensor::from({x}), false);
    CHECK(ops::gelu(v).value()[0] == doctest::Approx(oracle::gelu(x)).epsilon(1e-15));
    const double h = 1e-5;
    const double d1 = (oracle::gelu(x + h) - oracle::gelu(x - h)) / (2 * h);
    const double d2 = (oracle::gelu(x + h) - 2 * oracle::gelu(x) + oracle::gelu(x - h)) / (h * h);
    CHECK(ops::gelu_grad(v).value()[0] == doctest::Approx(d1).epsilon(1e-8));
    CHECK(ops::gelu_grad2(v).value()[0] == doctest::Approx(d2).epsilon(1e-4));
  }
}

TEST_CASE("cross entropy of uniform logits is log C") {
  Tape tape;
  Var logits = tape.constant(Tensor({2, 4}, 0.3));
  CHECK(ops::cross_entropy(logits, {0, 3}).value().item() == doctest::Approx(std::log(4.0)));
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(1);
  Tape tape;
  const Tensor y = ops::softmax_last(tape.constant(random_tensor({3, 5}, rng, 10.0))).value();
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 5; ++c) s += y[r * 5 + c];
    CHECK(s == doctest::Approx(1.0));
  }
}

TEST_CASE("hvp of a quadratic is A v") {
  Rng rng(2);
  const Tensor a = random_tensor({4, 4}, rng);
  Tensor sym({4, 4});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) sym[i * 4 + j] = a[i * 4 + j] + a[j * 4 + i];
  const Tensor w = random_tensor({4, 1}, rng), v = random_tensor({4, 1}, rng);
  LossFn loss = [&](Tape& tape, const std::map<std::string, Var>& p) {
    Var x = p.at("w");
    return ops::scale(ops::sum_all(ops::mul(x, ops::matmul(tape.constant(sym), x))), 0.5);
  };
  const GradMap hv = hvp(loss, {{"w", w}}, {{"w", v}});
  for (std::size_t i = 0; i < 4; ++i) {
    double ref = 0.0;
    for (std::size_t j = 0; j < 4; ++j) ref += sym[i * 4 + j] * v[j];
    CHECK(hv.at("w")[i] == doctest::Approx(ref).epsilon(1e-12));
  }
}

TEST_CASE("hvp of a linear function is zero") {
  LossFn loss = [](Tape&, const std::map<std::string, Var>& p) { return ops::sum_all(ops::scale(p.at("w"), 2.0)); };
  const GradMap hv = hvp(loss, {{"w", Tensor::from({1.0, 2.0})}}, {{"w", Tensor::from({1.0, 1.0})}});
  CHECK(hv.at("w")[0] == 0.0);
  CHECK(hv.at("w")[1] == 0.0);
}

TEST_CASE("hvp validates direction keys and shapes") {
  LossFn loss = [](Tape&, const std::map<std::string, Var>& p) { return ops::sum_all(p.at("w")); };
  CHECK_THROWS_AS(hvp(loss, {{"w", Tensor::from({1.0})}}, {{"u", Tensor::from({1.0})}}), ContractViolation);
  CHECK_THROWS_AS(hvp(loss, {{"w", Tensor::from({1.0})}}, {{"w", Tensor::from({1.0, 2.0})}}), ContractViolation);
}

TEST_CASE("small model gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto variant = static_cast<AdapterVariant>(seed % 4);
    auto sm = oracle::random_small_model(seed, variant);
    const LossFn loss = oracle::model_loss(sm.model, sm.batch);
    const GradMap params = oracle::trainable_params(sm.model);
    CAPTURE(seed);
    CHECK(oracle::normwise_rel_err(gradient(loss, params), oracle::fd_gradient(loss, params, 1e-5)) < 1e-6);
  }
}

TEST_CASE("hvp is symmetric and linear on a small model") {
  auto sm = oracle::random_small_model(42, AdapterVariant::houlsby);
  const LossFn loss = oracle::model_loss(sm.model, sm.batch);
  const GradMap params = oracle::trainable_params(sm.model);
  Rng rng(9);
  const GradMap u = oracle::random_direction(params, rng), v = oracle::random_direction(params, rng);
  const GradMap hu = hvp(loss, params, u), hv = hvp(loss, params, v);
  CHECK(std::abs(oracle::dot(u, hv) - oracle::dot(v, hu)) < 1e-10);

  GradMap combo = u;
  for (auto& [name, t] : combo)
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 2.0 * u.at(name)[i] - 3.0 * v.at(name)[i];
  const GradMap hc = hvp(loss, params, combo);
  GradMap expected = hu;
  for (auto& [name, t] : expected)
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 2.0 * hu.at(name)[i] - 3.0 * hv.at(name)[i];
  CHECK(oracle::normwise_rel_err(hc, expected) < 1e-10);
  CHECK(oracle::normwise_rel_err(hu, oracle::fd_hvp(loss, params, u, 1e-4)) < 1e-4);
}

TEST_CASE("replay reproduces every node bit for bit") {
  auto sm = oracle::random_small_model(3, AdapterVariant::mam);
  Tape tape;
  ParamBinder binder(tape, sm.model, true);
  Var loss = classification_loss(sm.model, binder, sm.batch);
  (void)backward(loss);
  std::vector<Tensor> before;
  for (std::size_t i = 0; i < tape.size(); ++i) before.push_back(tape.node(i).value);
  tape.replay();
  for (std::size_t i = 0; i < tape.size(); ++i) {
    CAPTURE(tape.node(i).op);
    CHECK(bitwise_equal(before[i], tape.node(i).value));
  }
}

}  // TEST_SUITE
