#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "crin/loss.hpp"
#include "test_util.hpp"

using namespace crin;
using crin::testing::random_tensor;

namespace {

Tensor random_mask(Shape s, std::mt19937_64& rng, DType dtype = DType::f32, double p = 0.4) {
  std::bernoulli_distribution d(p);
  Tensor t(s, dtype);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, d(rng) ? 1.0 : 0.0);
  return t;
}

double eval_scalar(const std::function<Var(Tape&)>& f) {
  Tape tape(false);
  return f(tape).value().at(0);
}

CrinConfig tiny_config() {
  CrinConfig c;
  c.stage_widths = {12, 24};
  c.num_stages = 2;
  return c;
}

}  // namespace

TEST_CASE("dice loss closed forms") {
  std::mt19937_64 rng(1);
  const Tensor y = random_mask({2, 1, 32, 32}, rng);
  CHECK(eval_scalar([&](Tape& t) { return dice_loss(t.constant(y), y); }) <= 1e-3);
  for (std::int64_t side : {8, 64, 512}) {
    const Shape s{1, 1, side, side};
    const double n = static_cast<double>(s.numel());
    const double half = eval_scalar([&](Tape& t) {
      return dice_loss(t.constant(Tensor::full(s, 0.5, DType::f64)), Tensor::full(s, 1.0, DType::f64));
    });
    CHECK(half == doctest::Approx(1.0 - (n + 1) / (1.5 * n + 1)).epsilon(1e-12));
    const double zero = eval_scalar(
        [&](Tape& t) { return dice_loss(t.constant(Tensor(s, DType::f64)), Tensor::full(s, 1.0, DType::f64)); });
    CHECK(zero == doctest::Approx(1.0 - 1.0 / (n + 1)).epsilon(1e-12));
  }
  const double large = eval_scalar([&](Tape& t) {
    return dice_loss(t.constant(Tensor::full({1, 1, 1024, 1024}, 0.5, DType::f64)),
                     Tensor::full({1, 1, 1024, 1024}, 1.0, DType::f64));
  });
  CHECK(std::abs(large - 1.0 / 3.0) < 1e-6);
  Tape tape;
  CHECK_THROWS_AS(dice_loss(tape.constant(Tensor({1, 1, 4, 4})), Tensor({1, 1, 4, 5})), ShapeError);
}

TEST_CASE("bce closed forms, symmetry and stability") {
  std::mt19937_64 rng(2);
  const Tensor y = random_mask({2, 1, 8, 8}, rng);
  CHECK(eval_scalar([&](Tape& t) { return bce_with_logits(t.constant(Tensor({2, 1, 8, 8})), y); }) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-7));
  CHECK(eval_scalar([&](Tape& t) {
          return bce_with_logits(t.constant(Tensor::full({1, 1, 4, 4}, 20.0, DType::f64)),
                                 Tensor::full({1, 1, 4, 4}, 1.0, DType::f64));
        }) <= 1e-8);
  const Tensor z = random_tensor({2, 1, 8, 8}, rng, DType::f64, -5, 5);
  const Tensor one_minus_y = ops::add_scalar(ops::scale(y, -1.0), 1.0);
  const double a = eval_scalar([&](Tape& t) { return bce_with_logits(t.constant(z), y); });
  const double b = eval_scalar([&](Tape& t) { return bce_with_logits(t.constant(ops::scale(z, -1.0)), one_minus_y); });
  CHECK(a == doctest::Approx(b).epsilon(1e-14));
  for (double big : {100.0, -100.0}) {
    Tape tape;
    Var zl = tape.leaf(Tensor::full({1, 1, 2, 2}, big, DType::f32));
    Var l = bce_with_logits(zl, Tensor::full({1, 1, 2, 2}, big > 0 ? 0.0 : 1.0, DType::f32));
    CHECK(std::isfinite(l.value().at(0)));
    CHECK(l.value().at(0) == doctest::Approx(100.0).epsilon(1e-6));
    tape.backward(l);
    CHECK(tape.grad(zl)->all_finite());
  }
}

TEST_CASE("task loss combines dice and bce equally") {
  const Shape s{1, 1, 1024, 1024};
  const double l = eval_scalar(
      [&](Tape& t) { return task_loss(t.constant(Tensor(s, DType::f64)), Tensor::full(s, 1.0, DType::f64)); });
  CHECK(std::abs(l - (1.0 / 3.0 + std::log(2.0)) / 2) < 1e-6);
  CHECK(std::abs(l - 0.5132) < 1e-4);

  std::mt19937_64 rng(3);
  const Tensor y = random_mask({2, 1, 16, 16}, rng, DType::f64);
  const Tensor z = random_tensor({2, 1, 16, 16}, rng, DType::f64, -3, 3);
  Tape tape(false);
  Var zt = tape.constant(z);
  const double d = dice_loss(ag::sigmoid(zt), y).value().at(0), b = bce_with_logits(zt, y).value().at(0);
  CHECK(task_loss(zt, y).value().at(0) == doctest::Approx((d + b) / 2).epsilon(1e-15));

  const Tensor confident = ops::add_scalar(ops::scale(y, 40.0), -20.0);
  CHECK(eval_scalar([&](Tape& t) { return task_loss(t.constant(confident), y); }) <= 1e-3);
}

TEST_CASE("aux loss") {
  const Tensor yb = Tensor::full({2, 1, 16, 16}, 1.0), yr = Tensor({2, 1, 16, 16});
  Tape tape;
  StageOutput st;
  st.aux_building = tape.constant(Tensor({2, 1, 8, 8}));
  st.aux_road = tape.constant(Tensor({2, 1, 8, 8}));
  CHECK(aux_loss(tape, {st}, 1, yb, yr).value().at(0) == doctest::Approx(2 * std::log(2.0)).epsilon(1e-6));
  CHECK(aux_loss(tape, {}, 0, yb, yr).value().at(0) == 0.0);
  CHECK_THROWS_AS(aux_loss(tape, {st}, 2, yb, yr), ShapeError);
  CHECK_THROWS_AS(aux_loss(tape, {StageOutput{}}, 1, yb, yr), ShapeError);

  std::mt19937_64 rng(4);
  std::vector<StageOutput> four;
  double sum = 0;
  for (int j = 0; j < 4; ++j) {
    StageOutput s;
    const std::int64_t side = 2 << j;
    s.aux_building = tape.constant(random_tensor({2, 1, side, side}, rng, DType::f32, -3, 3));
    s.aux_road = tape.constant(random_tensor({2, 1, side, side}, rng, DType::f32, -3, 3));
    const double term = aux_loss(tape, {s}, 1, yb, yr).value().at(0);
    CHECK(term >= 0);
    sum += term;
    four.push_back(s);
  }
  CHECK(aux_loss(tape, four, 4, yb, yr).value().at(0) == doctest::Approx(sum).epsilon(1e-6));
}

TEST_CASE("total loss weighting") {
  const LossBreakdown l = combine_losses(1.0, 2.0, 3.0);
  CHECK(l.l_total == doctest::Approx(3.3).epsilon(1e-15));
  CHECK(combine_losses(0, 0, 0).l_total == 0.0);

  Model m(ModelKind::full_crin, tiny_config(), 1);
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({2, 3, 32, 32}, rng);
  const Tensor yb = random_mask({2, 1, 32, 32}, rng), yr = random_mask({2, 1, 32, 32}, rng);
  Tape tape;
  Binding b(tape, m.params(), true);
  LossTerms t = total_loss(tape, m, m.forward(b, tape.constant(x)), yb, yr);
  const LossBreakdown v = t.values();
  CHECK(v.l_building > 0);
  CHECK(v.l_road > 0);
  CHECK(v.l_aux > 0);
  CHECK(std::abs(v.l_total - (v.l_building + v.l_road + 0.1 * v.l_aux)) <= 1e-6);

  Model naive(ModelKind::naive_multitask, tiny_config(), 1);
  Tape t2;
  Binding b2(t2, naive.params(), true);
  CHECK(total_loss(t2, naive, naive.forward(b2, t2.constant(x)), yb, yr).values().l_aux == 0.0);
}

TEST_CASE("dice and bce gradients match finite differences") {
  std::mt19937_64 rng(6);
  ParamStore p(DType::f64);
  p.add("z", random_tensor({2, 1, 6, 7}, rng, DType::f64, -2, 2));
  const Tensor y = random_mask({2, 1, 6, 7}, rng, DType::f64);
  for (int which = 0; which < 3; ++which) {
    CAPTURE(which);
    LossProgram fn = [&](Binding& b) {
      Var z = b.param("z");
      if (which == 0) return dice_loss(ag::sigmoid(z), y);
      if (which == 1) return bce_with_logits(z, y);
      return task_loss(z, y);
    };
    CHECK(grad_check(fn, p).max_rel_err() <= 1e-6);
  }
  // Dice on raw probabilities, away from the sigmoid.
  ParamStore q(DType::f64);
  q.add("p", random_tensor({1, 1, 5, 5}, rng, DType::f64, 0.05, 0.95));
  const Tensor yq = random_mask({1, 1, 5, 5}, rng, DType::f64);
  CHECK(grad_check([&](Binding& b) { return dice_loss(b.param("p"), yq); }, q).max_rel_err() <= 1e-6);
}

TEST_CASE("confusion accumulation") {
  std::mt19937_64 rng(7);
  const Tensor y = random_mask({2, 1, 8, 8}, rng);
  ConfusionCounts exact;
  confusion_update(exact, y, y);
  CHECK(exact.fp == 0);
  CHECK(exact.fn == 0);
  CHECK(exact.tp + exact.tn == 128);

  ConfusionCounts inverted;
  confusion_update(inverted, ops::add_scalar(ops::scale(y, -1.0), 1.0), y);
  CHECK(inverted.tp == 0);
  CHECK(inverted.tn == 0);
  CHECK(inverted.fp == exact.tn);
  CHECK(inverted.fn == exact.tp);

  ConfusionCounts edge;
  confusion_update(edge, Tensor::full({1, 1, 1, 1}, 0.5), Tensor::full({1, 1, 1, 1}, 1.0));
  CHECK(edge.tp == 1);

  for (int trial = 0; trial < 20; ++trial) {
    const Tensor p1 = random_tensor({2, 1, 5, 5}, rng, DType::f32, 0, 1), p2 = random_tensor({3, 1, 5, 5}, rng, DType::f32, 0, 1);
    const Tensor y1 = random_mask({2, 1, 5, 5}, rng), y2 = random_mask({3, 1, 5, 5}, rng);
    ConfusionCounts split, split_rev, joined;
    confusion_update(split, p1, y1);
    confusion_update(split, p2, y2);
    confusion_update(split_rev, p2, y2);
    confusion_update(split_rev, p1, y1);
    confusion_update(joined, ops::concat({&p1, &p2}, 0), ops::concat({&y1, &y2}, 0));
    CHECK(split == joined);
    CHECK(split_rev == joined);
    CHECK(joined.total() == 125);
  }
  ConfusionCounts c;
  CHECK_THROWS_AS(confusion_update(c, Tensor({1, 1, 2, 2}), Tensor({1, 1, 2, 3})), ShapeError);
  CHECK_THROWS_AS(confusion_update(c, Tensor({1, 1, 1, 1}), Tensor::full({1, 1, 1, 1}, 0.5)), std::invalid_argument);
}

TEST_CASE("metric identities") {
  // Counts with precision 0.8379 and recall 0.8250 exactly.
  const ConfusionCounts table{92169, 17831, 19551, 0};
  const Metrics t = metrics_compute(table);
  CHECK(t.precision == doctest::Approx(0.8379).epsilon(1e-12));
  CHECK(t.recall == doctest::Approx(0.8250).epsilon(1e-12));
  CHECK(std::abs(100 * t.f1 - 83.14) <= 0.01);
  CHECK(std::abs(100 * t.iou - 71.15) <= 0.02);
  CHECK(t.iou == doctest::Approx(t.f1 / (2 - t.f1)).epsilon(1e-12));

  const Metrics perfect = metrics_compute({1000, 0, 0, 24});
  CHECK(perfect.precision == 1.0);
  CHECK(perfect.recall == 1.0);
  CHECK(perfect.f1 == 1.0);
  CHECK(perfect.iou == 1.0);

  const Metrics m = metrics_compute({50, 25, 25, 0});
  CHECK(m.precision == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(m.recall == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(m.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(m.iou == 0.5);
  CHECK(m.undefined.empty());

  const Metrics empty = metrics_compute({0, 0, 0, 10});
  CHECK(empty.iou == 0.0);
  CHECK(empty.undefined == std::vector<std::string>{"precision", "recall", "f1", "iou"});

  std::mt19937_64 rng(8);
  std::uniform_int_distribution<std::uint64_t> d(0, 1000);
  for (int i = 0; i < 1000; ++i) {
    const ConfusionCounts c{d(rng) + 1, d(rng), d(rng), d(rng)};
    const Metrics r = metrics_compute(c);
    CHECK(0.0 <= r.iou);
    CHECK(r.iou <= r.f1 + 1e-15);
    CHECK(r.f1 <= 1.0);
    CHECK(r.iou == doctest::Approx(r.f1 / (2 - r.f1)).epsilon(1e-12));
  }
}

TEST_CASE("metrics csv uses percent with two decimals") {
  const Metrics m = metrics_compute({50, 25, 25, 0});
  CHECK(metrics_csv({{"building", m}}) == "task,iou,precision,recall,f1\nbuilding,50.00,66.67,66.67,66.67\n");
  CHECK(metrics_table({{"road", metrics_compute({0, 0, 0, 1})}}).find("0/0") != std::string::npos);
}

TEST_CASE("every parameter of every variant receives gradient") {
  for (ModelKind kind : {ModelKind::baseline, ModelKind::naive_multitask, ModelKind::mti_only, ModelKind::full_crin}) {
    CAPTURE(model_kind_name(kind));
    Model m(kind, tiny_config(), 2);
    std::mt19937_64 rng(9);
    const Tensor x = random_tensor({2, 3, 32, 32}, rng);
    const Tensor yb = random_mask({2, 1, 32, 32}, rng), yr = random_mask({2, 1, 32, 32}, rng);
    Tape tape;
    Binding b(tape, m.params(), true);
    LossTerms t = total_loss(tape, m, m.forward(b, tape.constant(x)), yb, yr);
    GradMap g = backward(t.total, b);
    CHECK(g.size() == m.params().names(true).size());
    for (const auto& [name, grad] : g) {
      CAPTURE(name);
      CHECK(ops::sum(ops::mul(grad, grad)) > 0.0);
    }
  }
}

TEST_CASE("end-to-end gradient check on a tiny model") {
  for (AttentionMlp attn : {AttentionMlp::dense, AttentionMlp::per_space}) {
    CrinConfig c = tiny_config();
    c.attention = attn;
    Model m(ModelKind::full_crin, c, 3, DType::f64);
    std::mt19937_64 rng(10);
    const Tensor x = random_tensor({1, 3, 32, 32}, rng, DType::f64);
    const Tensor yb = random_mask({1, 1, 32, 32}, rng, DType::f64), yr = random_mask({1, 1, 32, 32}, rng, DType::f64);
    LossProgram fn = [&](Binding& b) {
      return total_loss(b.tape(), m, m.forward(b, b.tape().constant(x)), yb, yr).total;
    };
    GradCheckOptions opt;
    opt.max_coords_per_param = 3;
    opt.eps = 1e-5;
    GradientReport rep = grad_check(fn, m.params(), opt);
    CHECK(rep.params.size() == m.params().names(true).size());
    CHECK(rep.max_rel_err() <= 1e-3);
  }
}
