#include "crin/loss.hpp"

#include <fmt/format.h>

#include <cmath>

namespace crin {

namespace {

void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) throw ShapeError(fmt::format("{}: prediction {} and target {} differ", op, a.str(), b.str()));
}

Tensor scalar(double v, DType dtype) { return Tensor::full({1, 1, 1, 1}, v, dtype); }

}  // namespace

Var bce_with_logits(Var logits, const Tensor& target) {
  require_same_shape("bce_with_logits", logits.shape(), target.shape());
  const Tensor& z = logits.value();
  const Tensor y = target.to(z.dtype());
  const auto n = static_cast<double>(z.numel());
  double total = 0;
  dispatch(z.dtype(), [&]<typename T>() {
    auto zs = z.data<T>();
    auto ys = y.data<T>();
    for (std::size_t i = 0; i < zs.size(); ++i) {
      const double zi = zs[i], yi = ys[i];
      total += std::max(zi, 0.0) - zi * yi + std::log1p(std::exp(-std::abs(zi)));
    }
  });
  return logits.tape->record(
      "bce_with_logits", scalar(total / n, z.dtype()), {logits},
      [y, n](BackwardContext& c) {
        const double g = c.grad_out().at(0) / n;
        const Tensor& zt = c.input(0);
        Tensor grad(zt.shape(), zt.dtype());
        dispatch(zt.dtype(), [&]<typename T>() {
          auto zs = zt.data<T>();
          auto ys = y.data<T>();
          auto gs = grad.data<T>();
          for (std::size_t i = 0; i < zs.size(); ++i) {
            const double zi = zs[i];
            const double sig = zi >= 0 ? 1.0 / (1.0 + std::exp(-zi)) : std::exp(zi) / (1.0 + std::exp(zi));
            gs[i] = static_cast<T>(g * (sig - static_cast<double>(ys[i])));
          }
        });
        c.give(0, std::move(grad));
      },
      4 * z.numel());
}

Var dice_loss(Var prob, const Tensor& target, double eps) {
  require_same_shape("dice_loss", prob.shape(), target.shape());
  const Tensor& p = prob.value();
  const Tensor y = target.to(p.dtype());
  double inter = 0, sum_p = 0, sum_y = 0;
  dispatch(p.dtype(), [&]<typename T>() {
    auto ps = p.data<T>();
    auto ys = y.data<T>();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      inter += static_cast<double>(ps[i]) * ys[i];
      sum_p += ps[i];
      sum_y += ys[i];
    }
  });
  const double num = 2 * inter + eps, den = sum_p + sum_y + eps;
  return prob.tape->record(
      "dice_loss", scalar(1.0 - num / den, p.dtype()), {prob},
      [y, num, den](BackwardContext& c) {
        // d/dp_i = -(2 y_i den - num) / den^2
        const double g = c.grad_out().at(0);
        Tensor grad(y.shape(), y.dtype());
        dispatch(y.dtype(), [&]<typename T>() {
          auto ys = y.data<T>();
          auto gs = grad.data<T>();
          for (std::size_t i = 0; i < ys.size(); ++i)
            gs[i] = static_cast<T>(-g * (2.0 * ys[i] * den - num) / (den * den));
        });
        c.give(0, std::move(grad));
      },
      3 * p.numel());
}

Var task_loss(Var logits, const Tensor& target) {
  Var d = dice_loss(ag::sigmoid(logits), target);
  Var b = bce_with_logits(logits, target);
  return ag::weighted_sum({d, b}, {0.5, 0.5});
}

Var aux_loss(Tape& tape, const std::vector<StageOutput>& stages, std::size_t expected_stages, const Tensor& y_building,
             const Tensor& y_road) {
  if (stages.size() != expected_stages)
    throw ShapeError(fmt::format("aux_loss: {} stages given, {} aux head pairs expected", stages.size(),
                                 expected_stages));
  if (stages.empty()) return tape.constant(scalar(0.0, y_building.dtype()));
  const Shape t = y_building.shape();
  std::vector<Var> terms;
  for (const auto& st : stages) {
    if (!st.aux_building.valid() || !st.aux_road.valid())
      throw ShapeError(fmt::format("aux_loss: stage {} has no aux logits", st.index));
    for (auto [logits, target] : {std::pair<Var, const Tensor*>{st.aux_building, &y_building}, {st.aux_road, &y_road}}) {
      const Shape s = logits.shape();
      if (s.h != t.h || s.w != t.w) logits = ag::resize_bilinear(logits, t.h, t.w);
      terms.push_back(bce_with_logits(logits, *target));
    }
  }
  return ag::weighted_sum(terms, std::vector<double>(terms.size(), 1.0));
}

LossBreakdown combine_losses(double l_building, double l_road, double l_aux, double aux_weight) {
  return {l_building, l_road, l_aux, l_building + l_road + aux_weight * l_aux};
}

LossBreakdown LossTerms::values() const {
  return {building.value().at(0), road.value().at(0), aux.value().at(0), total.value().at(0)};
}

LossTerms total_loss(Tape& tape, const Model& model, const ModelOutput& out, const Tensor& y_building,
                     const Tensor& y_road, double aux_weight) {
  LossTerms t;
  {
    Scope scope(tape, "loss");
    t.building = task_loss(out.building, y_building);
    t.road = task_loss(out.road, y_road);
    const std::size_t expected = model.has_mti() ? static_cast<std::size_t>(model.config().num_stages) : 0;
    t.aux = aux_loss(tape, out.stages, expected, y_building, y_road);
    t.total = ag::weighted_sum({t.building, t.road, t.aux}, {1.0, 1.0, aux_weight});
  }
  return t;
}

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  tn += o.tn;
  return *this;
}

void confusion_update(ConfusionCounts& counts, const Tensor& prob, const Tensor& target, double threshold) {
  require_same_shape("confusion_update", prob.shape(), target.shape());
  ConfusionCounts add;
  for (std::int64_t i = 0; i < prob.numel(); ++i) {
    const double y = target.at(i);
    if (y != 0.0 && y != 1.0)
      throw std::invalid_argument(fmt::format("confusion_update: target value {} at index {} is not binary", y, i));
    const bool pred = prob.at(i) >= threshold;
    if (pred) ++(y == 1.0 ? add.tp : add.fp);
    else ++(y == 1.0 ? add.fn : add.tn);
  }
  counts += add;
}

Metrics metrics_compute(const ConfusionCounts& c) {
  Metrics m;
  auto ratio = [&](double num, double den, const char* name) {
    if (den == 0) {
      m.undefined.emplace_back(name);
      return 0.0;
    }
    return num / den;
  };
  const auto tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  m.precision = ratio(tp, tp + fp, "precision");
  m.recall = ratio(tp, tp + fn, "recall");
  m.f1 = ratio(2 * m.precision * m.recall, m.precision + m.recall, "f1");
  m.iou = ratio(tp, tp + fp + fn, "iou");
  return m;
}

std::string metrics_csv(const std::vector<std::pair<std::string, Metrics>>& rows) {
  std::string out = "task,iou,precision,recall,f1\n";
  for (const auto& [task, m] : rows)
    out += fmt::format("{},{:.2f},{:.2f},{:.2f},{:.2f}\n", task, 100 * m.iou, 100 * m.precision, 100 * m.recall,
                       100 * m.f1);
  return out;
}

std::string metrics_table(const std::vector<std::pair<std::string, Metrics>>& rows) {
  std::string out = fmt::format("{:<10} {:>8} {:>10} {:>8} {:>8}\n", "task", "IoU", "Precision", "Recall", "F1");
  for (const auto& [task, m] : rows) {
    out += fmt::format("{:<10} {:>8.2f} {:>10.2f} {:>8.2f} {:>8.2f}", task, 100 * m.iou, 100 * m.precision,
                       100 * m.recall, 100 * m.f1);
    if (!m.undefined.empty()) {
      out += "  (0/0:";
      for (const auto& u : m.undefined) out += " " + u;
      out += ")";
    }
    out += "\n";
  }
  return out;
}

}  // namespace crin
