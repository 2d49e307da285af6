#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "crin/autograd.hpp"
#include "crin/gradcheck.hpp"
#include "test_util.hpp"

using namespace crin;
using crin::testing::random_tensor;

namespace {

// Contracts an op output against a fixed random tensor so every output
// coordinate contributes a distinct weight to the scalar.
Var project(Binding& b, Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Var r = b.tape().constant(random_tensor(y.shape(), rng, y.value().dtype()));
  return ag::sum(ag::mul(y, r));
}

}  // namespace

TEST_CASE("backward: linear map gives the fixed operand") {
  std::mt19937_64 rng(1);
  ParamStore store(DType::f64);
  store.add("w", random_tensor({2, 3, 4, 4}, rng, DType::f64));
  Tensor x = random_tensor({2, 3, 4, 4}, rng, DType::f64);
  Tape tape;
  Binding b(tape, store, true);
  Var loss = ag::sum(ag::mul(b.param("w"), tape.constant(x)));
  GradMap g = backward(loss, b);
  CHECK(g.at("w").identical(x));
}

TEST_CASE("backward: dead ReLU gives exact zeros") {
  ParamStore store(DType::f64);
  store.add("w", Tensor::full({1, 2, 3, 3}, -0.5, DType::f64));
  Tape tape;
  Binding b(tape, store, true);
  GradMap g = backward(ag::sum(ag::relu(b.param("w"))), b);
  for (std::int64_t i = 0; i < 18; ++i) CHECK(g.at("w").at(i) == 0.0);
}

TEST_CASE("backward: contract violations") {
  ParamStore store(DType::f64);
  store.add("w", Tensor::full({1, 2, 1, 1}, 1.0, DType::f64));
  {
    Tape tape;
    Binding b(tape, store, true);
    CHECK_THROWS_AS(backward(b.param("w"), b), ShapeError);
  }
  {
    Tape tape, other;
    Binding b(tape, store, true);
    Var foreign = other.leaf(Tensor::full({1, 1, 1, 1}, 1.0, DType::f64));
    CHECK_THROWS_AS(backward(foreign, b), ShapeError);
    CHECK_THROWS_AS(ag::add(b.param("w"), other.leaf(Tensor({1, 2, 1, 1}, DType::f64))), ShapeError);
  }
}

TEST_CASE("backward: parameters off the loss path receive zero gradients") {
  ParamStore store(DType::f64);
  store.add("used", Tensor::full({1, 1, 2, 2}, 2.0, DType::f64));
  store.add("unused", Tensor::full({1, 1, 2, 2}, 3.0, DType::f64));
  store.add("stat", Tensor::full({1, 1, 1, 1}, 3.0, DType::f64), false);
  Tape tape;
  Binding b(tape, store, true);
  GradMap g = backward(ag::sum(b.param("used")), b);
  CHECK(g.size() == 2);
  CHECK(g.at("unused").shape() == Shape{1, 1, 2, 2});
  CHECK(ops::sum(g.at("unused")) == 0.0);
  CHECK(ops::sum(g.at("used")) == 4.0);
}

TEST_CASE("batch-norm running statistics are never differentiated") {
  std::mt19937_64 rng(4);
  ParamStore store(DType::f64);
  store.add("x", random_tensor({3, 2, 4, 4}, rng, DType::f64));
  store.add("gamma", Tensor::full({2, 1, 1, 1}, 1.0, DType::f64));
  store.add("beta", Tensor({2, 1, 1, 1}, DType::f64));
  store.add("running_mean", Tensor({2, 1, 1, 1}, DType::f64), false);
  store.add("running_var", Tensor::full({2, 1, 1, 1}, 1.0, DType::f64), false);
  for (bool training : {true, false}) {
    Tape tape;
    Binding b(tape, store, training);
    Var y = ag::batch_norm(b.param("x"), b.param("gamma"), b.param("beta"), b.buffer("running_mean"),
                           b.buffer("running_var"), training);
    GradMap g = backward(project(b, y, 3), b);
    CHECK(!g.contains("running_mean"));
    CHECK(!g.contains("running_var"));
  }
  CHECK(store.at("running_mean").at(0) != 0.0);
}

TEST_CASE("gradient accumulation over shared subexpressions") {
  // f(w) = sum(relu(w) * relu(w) * c): the relu node feeds two consumers.
  std::mt19937_64 rng(2);
  ParamStore store(DType::f64);
  store.add("w", random_tensor({1, 2, 3, 3}, rng, DType::f64));
  Tensor c = random_tensor({1, 2, 3, 3}, rng, DType::f64);
  GradMap shared, unshared;
  {
    Tape tape;
    Binding b(tape, store, true);
    Var r = ag::relu(b.param("w"));
    shared = backward(ag::sum(ag::mul(ag::mul(r, r), tape.constant(c))), b);
  }
  {
    Tape tape;
    Binding b(tape, store, true);
    Var w = b.param("w");
    Var r1 = ag::relu(w), r2 = ag::relu(w);
    unshared = backward(ag::sum(ag::mul(ag::mul(r1, r2), tape.constant(c))), b);
  }
  CHECK(crin::testing::max_abs_diff(shared.at("w"), unshared.at("w")) == 0.0);
  // Closed form: 2 relu(w) c.
  for (std::int64_t i = 0; i < 18; ++i) {
    const double w = store.at("w").at(i);
    CHECK(shared.at("w").at(i) == doctest::Approx(w > 0 ? 2 * w * c.at(i) : 0.0));
  }
}

TEST_CASE("grad_check: quadratic and affine programs") {
  ParamStore store(DType::f64);
  store.add("x", Tensor::full({1, 1, 1, 1}, 1.0, DType::f64));
  auto sq = grad_check([](Binding& b) { Var x = b.param("x"); return ag::sum(ag::mul(x, x)); }, store);
  CHECK(sq.params.size() == 1);
  CHECK(sq.max_rel_err() <= 1e-7);

  std::mt19937_64 rng(3);
  ParamStore affine(DType::f64);
  affine.add("x", random_tensor({1, 3, 2, 2}, rng, DType::f64));
  Tensor c = random_tensor({1, 3, 2, 2}, rng, DType::f64);
  auto rep = grad_check(
      [&](Binding& b) { return ag::add_scalar(ag::sum(ag::mul(b.param("x"), b.tape().constant(c))), 4.0); },
      affine);
  CHECK(rep.max_rel_err() <= 1e-9);
  CHECK(rep.csv().rfind("param,max_rel_err,mean_rel_err\n", 0) == 0);
}

TEST_CASE("grad_check: detects a non-deterministic program") {
  ParamStore store(DType::f64);
  store.add("x", Tensor::full({1, 1, 1, 1}, 1.0, DType::f64));
  int calls = 0;
  auto fn = [&](Binding& b) { return ag::add_scalar(ag::sum(b.param("x")), 1e-3 * ++calls); };
  CHECK_THROWS_AS(grad_check(fn, store), NondeterminismError);
}

TEST_CASE("every differentiable op passes a 64-bit finite-difference check") {
  const auto cases = op_gradcheck_suite();
  CHECK(cases.size() >= 30);
  for (const auto& c : cases) {
    CAPTURE(c.name);
    CHECK(!c.report.params.empty());
    CHECK(c.report.max_rel_err() <= 1e-5);
  }
  CHECK(gradcheck_summary(cases).rfind("case,params,tolerance,max_rel_err,result\n", 0) == 0);
}
