#include "crin/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>

namespace crin {

const Tensor& Var::value() const {
  if (!valid()) throw ShapeError("Var: dangling or default-constructed handle");
  return tape->value(*this);
}

// ---------------------------------------------------------------------------
// BackwardContext

const Tensor& BackwardContext::grad_out() const { return *tape_.nodes_[node_].grad; }
const Tensor& BackwardContext::output() const { return tape_.nodes_[node_].value; }

const Tensor& BackwardContext::input(std::size_t i) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs.at(i)].value;
}

bool BackwardContext::needs(std::size_t i) const {
  const auto& inputs = tape_.nodes_[node_].inputs;
  return i < inputs.size() && tape_.nodes_[inputs[i]].requires_grad;
}

void BackwardContext::give(std::size_t i, Tensor grad) {
  if (!needs(i)) return;
  auto& target = tape_.nodes_[tape_.nodes_[node_].inputs[i]];
  if (grad.shape() != target.value.shape()) grad = std::move(grad).reshaped(target.value.shape());
  if (target.grad) {
    ops::accumulate(*target.grad, grad);
  } else {
    target.grad = std::move(grad);
  }
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{"constant", {}, {}, {}, std::move(value), std::nullopt, false});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Tensor value, std::string name) {
  nodes_.push_back(Node{"leaf", std::move(name), {}, {}, std::move(value), std::nullopt, record_grad_});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(const char* op, Tensor value, const std::vector<Var>& inputs, BackwardFn fn, std::int64_t macs) {
  Node n;
  n.op = op;
  bool any = false;
  for (const Var& v : inputs) {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
      throw ShapeError(std::string(op) + ": input belongs to a different tape or is dangling");
    }
    n.inputs.push_back(v.id);
    any = any || nodes_[v.id].requires_grad;
  }
  n.requires_grad = record_grad_ && any;
  if (n.requires_grad) n.fn = std::move(fn);

  std::string scope;
  for (const auto& s : scope_) scope += scope.empty() ? s : "." + s;
  costs_.push_back(OpCost{std::move(scope), op, macs < 0 ? value.numel() : macs});

  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
    throw ShapeError("Tape: dangling Var reference");
  }
  return nodes_[v.id];
}

void Tape::backward(Var loss) {
  const Node& root = node(loss);
  if (root.value.numel() != 1) throw ShapeError("backward: loss is not a scalar, shape " + root.value.shape().str());
  if (swept_) throw ShapeError("backward: tape already swept");
  swept_ = true;
  if (!root.requires_grad) return;
  nodes_[loss.id].grad = Tensor::full(root.value.shape(), 1.0, root.value.dtype());
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.grad || !n.fn) continue;
    BackwardContext ctx(*this, i);
    n.fn(ctx);
    // Interior gradients are not needed once propagated.
    n.grad.reset();
  }
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

const Tensor* Tape::grad(Var v) const {
  const Node& n = node(v);
  return n.grad ? &*n.grad : nullptr;
}

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

const std::string& Tape::name(Var v) const { return node(v).name; }

void Tape::push_scope(const std::string& name) { scope_.push_back(name); }

void Tape::pop_scope() {
  if (!scope_.empty()) scope_.pop_back();
}

// ---------------------------------------------------------------------------
// Binding

Var Binding::param(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const auto& e = params_.entry(name);
  Var v = e.learnable ? tape_.leaf(e.value, name) : tape_.constant(e.value);
  bound_.emplace(name, v);
  return v;
}

GradMap Binding::gradients() const {
  GradMap out;
  for (const auto& e : params_.entries()) {
    if (!e.learnable) continue;
    auto it = bound_.find(e.name);
    const Tensor* g = it != bound_.end() ? tape_.grad(it->second) : nullptr;
    out.emplace(e.name, g ? *g : Tensor(e.value.shape(), e.value.dtype()));
  }
  return out;
}

GradMap backward(Var loss, Binding& binding) {
  if (loss.tape != &binding.tape()) throw ShapeError("backward: loss recorded on a different tape");
  binding.tape().backward(loss);
  return binding.gradients();
}

// ---------------------------------------------------------------------------
// Differentiable operations

namespace ag {
namespace {

Tape& tape_of(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) throw ShapeError("autograd op: invalid Var");
    if (t != nullptr && v.tape != t) throw ShapeError("autograd op: inputs recorded on different tapes");
    t = v.tape;
  }
  return *t;
}

Tensor scalar_like(const Tensor& ref, double value) { return Tensor::full({1, 1, 1, 1}, value, ref.dtype()); }

}  // namespace

Var conv2d(Var x, Var weight, std::optional<Var> bias, const ConvSpec& spec) {
  Tape& t = bias ? tape_of({x, weight, *bias}) : tape_of({x, weight});
  Tensor y = ops::conv2d(x.value(), weight.value(), bias ? &bias->value() : nullptr, spec);
  const Shape& ys = y.shape();
  const std::int64_t macs =
      ys.n * ys.h * ys.w * spec.out_channels * (spec.in_channels / spec.groups) * spec.kernel_h * spec.kernel_w;
  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias.has_value();
  return t.record(
      "conv2d", std::move(y), inputs,
      [spec, has_bias](BackwardContext& c) {
        auto g = ops::conv2d_backward(c.input(0), c.input(1), c.grad_out(), spec, c.needs(0), c.needs(1),
                                      has_bias && c.needs(2));
        if (g.input) c.give(0, std::move(*g.input));
        if (g.weight) c.give(1, std::move(*g.weight));
        if (g.bias) c.give(2, std::move(*g.bias));
      },
      macs);
}

Var upsample(Var x, int factor, ops::UpsampleMode mode) {
  Tape& t = tape_of({x});
  return t.record("upsample", ops::upsample(x.value(), factor, mode), {x}, [factor, mode](BackwardContext& c) {
    c.give(0, ops::upsample_backward(c.grad_out(), c.input(0).shape(), factor, mode));
  });
}

Var resize_bilinear(Var x, std::int64_t out_h, std::int64_t out_w) {
  Tape& t = tape_of({x});
  return t.record("resize_bilinear", ops::resize_bilinear(x.value(), out_h, out_w), {x}, [](BackwardContext& c) {
    c.give(0, ops::resize_bilinear_backward(c.grad_out(), c.input(0).shape()));
  });
}

Var global_avg_pool(Var x) {
  Tape& t = tape_of({x});
  // One accumulation per input element.
  return t.record(
      "global_avg_pool", ops::global_avg_pool(x.value()), {x},
      [](BackwardContext& c) { c.give(0, ops::global_avg_pool_backward(c.grad_out(), c.input(0).shape())); },
      x.value().numel());
}

Var softmax(Var x, int axis) {
  Tape& t = tape_of({x});
  return t.record("softmax", ops::softmax(x.value(), axis), {x}, [axis](BackwardContext& c) {
    c.give(0, ops::softmax_backward(c.output(), c.grad_out(), axis));
  });
}

Var linear(Var x, Var weight, std::optional<Var> bias) {
  Tape& t = bias ? tape_of({x, weight, *bias}) : tape_of({x, weight});
  Tensor y = ops::linear(x.value(), weight.value(), bias ? &bias->value() : nullptr);
  const std::int64_t macs = x.shape().n * weight.shape().n * weight.shape().c;
  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias.has_value();
  return t.record(
      "linear", std::move(y), inputs,
      [has_bias](BackwardContext& c) {
        auto g = ops::linear_backward(c.input(0), c.input(1), c.grad_out(), c.needs(0), c.needs(1),
                                      has_bias && c.needs(2));
        if (g.input) c.give(0, std::move(*g.input));
        if (g.weight) c.give(1, std::move(*g.weight));
        if (g.bias) c.give(2, std::move(*g.bias));
      },
      macs);
}

Var add(Var a, Var b) {
  Tape& t = tape_of({a, b});
  return t.record("add", ops::add(a.value(), b.value()), {a, b}, [](BackwardContext& c) {
    if (c.needs(0)) c.give(0, c.grad_out());
    if (c.needs(1)) c.give(1, c.grad_out());
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of({a, b});
  return t.record("sub", ops::sub(a.value(), b.value()), {a, b}, [](BackwardContext& c) {
    if (c.needs(0)) c.give(0, c.grad_out());
    if (c.needs(1)) c.give(1, ops::scale(c.grad_out(), -1.0));
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of({a, b});
  return t.record("mul", ops::mul(a.value(), b.value()), {a, b}, [](BackwardContext& c) {
    if (c.needs(0)) c.give(0, ops::mul(c.grad_out(), c.input(1)));
    if (c.needs(1)) c.give(1, ops::mul(c.grad_out(), c.input(0)));
  });
}

Var scale(Var a, double alpha) {
  Tape& t = tape_of({a});
  return t.record("scale", ops::scale(a.value(), alpha), {a},
                  [alpha](BackwardContext& c) { c.give(0, ops::scale(c.grad_out(), alpha)); });
}

Var add_scalar(Var a, double value) {
  Tape& t = tape_of({a});
  return t.record("add_scalar", ops::add_scalar(a.value(), value), {a},
                  [](BackwardContext& c) { c.give(0, c.grad_out()); });
}

Var scale_channels(Var x, Var s) {
  Tape& t = tape_of({x, s});
  return t.record("scale_channels", ops::scale_channels(x.value(), s.value()), {x, s}, [](BackwardContext& c) {
    const Tensor& g = c.grad_out();
    if (c.needs(0)) c.give(0, ops::scale_channels(g, c.input(1)));
    if (c.needs(1)) {
      const Shape xs = c.input(0).shape();
      Tensor gs({xs.n, xs.c, 1, 1}, g.dtype());
      dispatch(g.dtype(), [&]<typename T>() {
        const T* gp = g.data<T>().data();
        const T* xp = c.input(0).data<T>().data();
        T* out = gs.data<T>().data();
        const std::int64_t plane = xs.h * xs.w;
        for (std::int64_t p = 0; p < xs.n * xs.c; ++p) {
          T acc = 0;
          for (std::int64_t i = 0; i < plane; ++i) acc += gp[p * plane + i] * xp[p * plane + i];
          out[p] = acc;
        }
      });
      c.give(1, std::move(gs));
    }
  });
}

Var relu(Var x) {
  Tape& t = tape_of({x});
  return t.record("relu", ops::relu(x.value()), {x},
                  [](BackwardContext& c) { c.give(0, ops::relu_backward(c.input(0), c.grad_out())); });
}

Var sigmoid(Var x) {
  Tape& t = tape_of({x});
  return t.record("sigmoid", ops::sigmoid(x.value()), {x},
                  [](BackwardContext& c) { c.give(0, ops::sigmoid_backward(c.output(), c.grad_out())); });
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape& t = *parts.front().tape;
  std::vector<const Tensor*> values;
  std::vector<std::int64_t> sizes;
  for (const Var& p : parts) {
    values.push_back(&p.value());
    sizes.push_back(p.shape()[axis]);
  }
  return t.record(
      "concat", ops::concat(values, axis), parts,
      [axis, sizes](BackwardContext& c) {
        std::int64_t start = 0;
        for (std::size_t i = 0; i < sizes.size(); ++i) {
          if (c.needs(i)) c.give(i, ops::slice(c.grad_out(), axis, start, sizes[i]));
          start += sizes[i];
        }
      },
      0);
}

Var channel_concat(Var a, Var b) { return concat({a, b}, 1); }

Var slice(Var x, int axis, std::int64_t start, std::int64_t len) {
  Tape& t = tape_of({x});
  return t.record(
      "slice", ops::slice(x.value(), axis, start, len), {x},
      [axis, start, len](BackwardContext& c) {
        const Tensor& g = c.grad_out();
        const Shape xs = c.input(0).shape();
        std::vector<Tensor> pieces;
        std::vector<const Tensor*> ptrs;
        Shape before = xs, after = xs;
        before[axis] = start;
        after[axis] = xs[axis] - start - len;
        Tensor zb(before, g.dtype()), za(after, g.dtype());
        if (start > 0) ptrs.push_back(&zb);
        ptrs.push_back(&g);
        if (after[axis] > 0) ptrs.push_back(&za);
        c.give(0, ops::concat(ptrs, axis));
      },
      0);
}

std::vector<Var> split(Var x, int axis, const std::vector<std::int64_t>& sizes) {
  const std::int64_t total = std::accumulate(sizes.begin(), sizes.end(), std::int64_t{0});
  if (total != x.shape()[axis]) {
    throw ShapeError("split: sizes sum to " + std::to_string(total) + " but axis extent is " +
                     std::to_string(x.shape()[axis]));
  }
  std::vector<Var> out;
  std::int64_t start = 0;
  for (std::int64_t len : sizes) {
    out.push_back(slice(x, axis, start, len));
    start += len;
  }
  return out;
}

Var reshape(Var x, Shape shape) {
  Tape& t = tape_of({x});
  return t.record(
      "reshape", x.value().reshaped(shape), {x},
      [](BackwardContext& c) { c.give(0, c.grad_out().reshaped(c.input(0).shape())); }, 0);
}

Var sum(Var x) {
  Tape& t = tape_of({x});
  return t.record(
      "sum", scalar_like(x.value(), ops::sum(x.value())), {x},
      [](BackwardContext& c) {
        c.give(0, Tensor::full(c.input(0).shape(), c.grad_out().at(0), c.input(0).dtype()));
      },
      x.value().numel());
}

Var mean(Var x) {
  const auto n = static_cast<double>(x.value().numel());
  return scale(sum(x), 1.0 / n);
}

Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.empty() || terms.size() != weights.size()) throw ShapeError("weighted_sum: terms/weights mismatch");
  Tape& t = *terms.front().tape;
  double total = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].value().numel() != 1) throw ShapeError("weighted_sum: terms must be scalars");
    total += weights[i] * terms[i].value().at(0);
  }
  return t.record("weighted_sum", scalar_like(terms.front().value(), total), terms,
                  [weights](BackwardContext& c) {
                    const double g = c.grad_out().at(0);
                    for (std::size_t i = 0; i < weights.size(); ++i) {
                      if (c.needs(i)) c.give(i, scalar_like(c.grad_out(), g * weights[i]));
                    }
                  });
}

Var batch_norm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var, bool training,
               const ops::BatchNormParams& params) {
  Tape& t = tape_of({x, gamma, beta});
  if (training) {
    auto cache = std::make_shared<ops::BatchNormCache>();
    Tensor y = ops::batch_norm_train(x.value(), gamma.value(), beta.value(), running_mean, running_var, params,
                                     t.recording() ? cache.get() : nullptr);
    return t.record("batch_norm", std::move(y), {x, gamma, beta}, [cache](BackwardContext& c) {
      auto g = ops::batch_norm_train_backward(c.grad_out(), c.input(1), *cache);
      c.give(0, std::move(g.input));
      c.give(1, std::move(g.gamma));
      c.give(2, std::move(g.beta));
    });
  }
  Tensor y = ops::batch_norm_eval(x.value(), gamma.value(), beta.value(), running_mean, running_var, params);
  return t.record("batch_norm", std::move(y), {x, gamma, beta},
                  [rm = running_mean, rv = running_var, params](BackwardContext& c) {
                    auto g = ops::batch_norm_eval_backward(c.input(0), c.grad_out(), c.input(1), rm, rv, params);
                    c.give(0, std::move(g.input));
                    c.give(1, std::move(g.gamma));
                    c.give(2, std::move(g.beta));
                  });
}

}  // namespace ag

// ---------------------------------------------------------------------------
// Gradient check

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

double GradientReport::max_rel_err() const {
  double m = 0;
  for (const auto& p : params) m = std::max(m, p.max_rel_err);
  return m;
}

std::string GradientReport::csv() const {
  std::ostringstream os;
  os << "param,max_rel_err,mean_rel_err\n";
  os.precision(6);
  for (const auto& p : params) os << p.name << "," << std::scientific << p.max_rel_err << "," << p.mean_rel_err << "\n";
  return os.str();
}

namespace {

double evaluate(const LossProgram& fn, ParamStore& params, bool training) {
  Tape tape(false);
  Binding binding(tape, params, training);
  Var loss = fn(binding);
  if (loss.value().numel() != 1) throw ShapeError("grad_check: program must return a scalar");
  return loss.value().at(0);
}

std::vector<std::int64_t> pick_coords(std::int64_t numel, std::int64_t limit, std::mt19937_64& rng) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(numel));
  std::iota(idx.begin(), idx.end(), 0);
  if (limit > 0 && limit < numel) {
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(limit));
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

}  // namespace

GradientReport grad_check(const LossProgram& fn, ParamStore& params, const GradCheckOptions& options) {
  if (options.eps <= 0) throw ShapeError("grad_check: eps must be positive");
  GradMap analytic;
  double base = 0;
  {
    Tape tape;
    Binding binding(tape, params, options.training);
    Var loss = fn(binding);
    base = loss.value().at(0);
    analytic = backward(loss, binding);
  }
  const double again = evaluate(fn, params, options.training);
  const double third = evaluate(fn, params, options.training);
  if (std::memcmp(&again, &third, sizeof(double)) != 0 || std::memcmp(&base, &again, sizeof(double)) != 0) {
    throw NondeterminismError("grad_check: repeated forward passes disagree (" + std::to_string(base) + " vs " +
                              std::to_string(again) + ")");
  }

  std::mt19937_64 rng(options.seed);
  GradientReport report;
  for (auto& e : params.entries()) {
    if (!e.learnable) continue;
    ParamGradError row;
    row.name = e.name;
    const Tensor& grad = analytic.at(e.name);
    double total = 0;
    for (std::int64_t idx : pick_coords(e.value.numel(), options.max_coords_per_param, rng)) {
      const double original = e.value.at(idx);
      e.value.set(idx, original + options.eps);
      const double plus = evaluate(fn, params, options.training);
      e.value.set(idx, original - options.eps);
      const double minus = evaluate(fn, params, options.training);
      e.value.set(idx, original);
      const double numeric = (plus - minus) / (2 * options.eps);
      const double err = relative_error(grad.at(idx), numeric);
      total += err;
      ++row.checked;
      if (err > row.max_rel_err || row.worst_index < 0) {
        row.max_rel_err = err;
        row.worst_index = idx;
      }
    }
    row.mean_rel_err = row.checked > 0 ? total / static_cast<double>(row.checked) : 0;
    report.params.push_back(row);
  }
  return report;
}

}  // namespace crin
