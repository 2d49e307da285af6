#pragma once

// Tape-based reverse-mode differentiation. Operations are recorded in
// execution order, so the tape is topologically sorted by construction and a
// single reverse sweep visits every node once.

#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "crin/ops.hpp"
#include "crin/params.hpp"
#include "crin/tensor.hpp"

namespace crin {

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class BackwardContext {
 public:
  BackwardContext(Tape& tape, int node) : tape_(tape), node_(node) {}

  const Tensor& grad_out() const;
  const Tensor& output() const;
  const Tensor& input(std::size_t i) const;
  bool needs(std::size_t i) const;
  /// Adds `grad` into input i's gradient (summing over all consumers).
  void give(std::size_t i, Tensor grad);

 private:
  Tape& tape_;
  int node_;
};

/// Per-op arithmetic cost as recorded during a forward pass.
struct OpCost {
  std::string scope;
  std::string op;
  std::int64_t macs = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(BackwardContext&)>;

  /// With record_grad = false no derivative closures are kept (inference).
  explicit Tape(bool record_grad = true) : record_grad_(record_grad) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value, std::string name = {});
  /// `macs` < 0 means one operation per output element.
  Var record(const char* op, Tensor value, const std::vector<Var>& inputs, BackwardFn fn, std::int64_t macs = -1);

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse.
  void backward(Var loss);

  const Tensor& value(Var v) const;
  const Tensor* grad(Var v) const;
  bool requires_grad(Var v) const;
  bool recording() const { return record_grad_; }
  std::size_t size() const { return nodes_.size(); }
  const std::string& name(Var v) const;

  void push_scope(const std::string& name);
  void pop_scope();
  const std::vector<OpCost>& costs() const { return costs_; }

 private:
  friend class BackwardContext;

  struct Node {
    std::string op;
    std::string name;
    std::vector<int> inputs;
    BackwardFn fn;
    Tensor value;
    std::optional<Tensor> grad;
    bool requires_grad = false;
  };

  const Node& node(Var v) const;

  bool record_grad_;
  bool swept_ = false;
  std::deque<Node> nodes_;
  std::vector<std::string> scope_;
  std::vector<OpCost> costs_;
};

/// RAII layer-name scope used for cost accounting.
class Scope {
 public:
  Scope(Tape& tape, const std::string& name) : tape_(tape) { tape_.push_scope(name); }
  ~Scope() { tape_.pop_scope(); }
  Scope(const Scope&) = delete;
  Scope& operator=(const Scope&) = delete;

 private:
  Tape& tape_;
};

using GradMap = std::map<std::string, Tensor>;

/// Binds a ParamStore's tensors to leaves of one tape.
class Binding {
 public:
  Binding(Tape& tape, ParamStore& params, bool training) : tape_(tape), params_(params), training_(training) {}

  /// Learnable entries become differentiable leaves; buffers become constants.
  Var param(const std::string& name);
  Tensor& buffer(const std::string& name) { return params_.at(name); }

  Tape& tape() { return tape_; }
  ParamStore& store() { return params_; }
  bool training() const { return training_; }
  DType dtype() const { return params_.dtype(); }

  /// After tape.backward(): every learnable parameter's gradient, zero-filled
  /// for parameters the loss does not reach.
  GradMap gradients() const;

 private:
  Tape& tape_;
  ParamStore& params_;
  bool training_;
  std::map<std::string, Var> bound_;
};

/// Runs backward from `loss` and returns gradients keyed by parameter name.
GradMap backward(Var loss, Binding& binding);

// Differentiable operations.
namespace ag {

Var conv2d(Var x, Var weight, std::optional<Var> bias, const ConvSpec& spec);
Var upsample(Var x, int factor, ops::UpsampleMode mode);
Var resize_bilinear(Var x, std::int64_t out_h, std::int64_t out_w);
Var global_avg_pool(Var x);
Var softmax(Var x, int axis);
Var linear(Var x, Var weight, std::optional<Var> bias);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double alpha);
Var add_scalar(Var a, double value);
Var scale_channels(Var x, Var s);
Var relu(Var x);
Var sigmoid(Var x);
Var concat(const std::vector<Var>& parts, int axis);
Var channel_concat(Var a, Var b);
Var slice(Var x, int axis, std::int64_t start, std::int64_t len);
std::vector<Var> split(Var x, int axis, const std::vector<std::int64_t>& sizes);
Var reshape(Var x, Shape shape);
Var sum(Var x);
Var mean(Var x);
/// Σ weights[i] · terms[i] over scalar terms.
Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights);
/// Running statistics are updated in training mode and never differentiated.
Var batch_norm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var, bool training,
               const ops::BatchNormParams& params = {});

}  // namespace ag

// Finite-difference verification.

struct GradCheckOptions {
  double eps = 1e-4;
  /// Coordinates checked per parameter; <= 0 checks every coordinate.
  std::int64_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
  bool training = true;
};

struct ParamGradError {
  std::string name;
  double max_rel_err = 0;
  double mean_rel_err = 0;
  std::int64_t worst_index = -1;
  std::int64_t checked = 0;
};

struct GradientReport {
  std::vector<ParamGradError> params;

  double max_rel_err() const;
  /// Header "param,max_rel_err,mean_rel_err" plus one row per parameter.
  std::string csv() const;
};

/// Thrown when two forward passes over identical inputs disagree.
class NondeterminismError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using LossProgram = std::function<Var(Binding&)>;

/// Relative error with denominator max(|a|, |b|, 1e-8).
double relative_error(double analytic, double numeric);

/// Compares analytic gradients of `fn` against central differences
/// (f(p+eps) - f(p-eps)) / (2 eps) for every learnable entry of `params`.
GradientReport grad_check(const LossProgram& fn, ParamStore& params, const GradCheckOptions& options = {});

}  // namespace crin
