#include "crin/gradcheck.hpp"

#include <fmt/format.h>

#include <functional>
#include <memory>
#include <random>

#include "crin/loss.hpp"
#include "crin/model.hpp"

namespace crin {

namespace {

Tensor uniform(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(shape, DType::f64);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, dist(rng));
  return t;
}

Tensor bernoulli(Shape shape, std::mt19937_64& rng, double p = 0.4) {
  std::bernoulli_distribution d(p);
  Tensor t(shape, DType::f64);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, d(rng) ? 1.0 : 0.0);
  return t;
}

Var project(Binding& b, Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ag::sum(ag::mul(y, b.tape().constant(uniform(y.shape(), rng))));
}

using Apply = std::function<Var(Binding&, std::vector<Var>&)>;

struct OpCase {
  const char* name;
  std::vector<std::pair<std::string, Shape>> inputs;
  Apply apply;
  double lo = -1.0;
  double hi = 1.0;
};

GradientReport check_op(const OpCase& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore store(DType::f64);
  for (const auto& [name, shape] : c.inputs) store.add(name, uniform(shape, rng, c.lo, c.hi));
  LossProgram fn = [&](Binding& b) {
    std::vector<Var> vars;
    for (const auto& in : c.inputs) vars.push_back(b.param(in.first));
    return project(b, c.apply(b, vars), seed + 1);
  };
  return grad_check(fn, store);
}

Apply batch_norm_case(bool training) {
  auto rm = std::make_shared<Tensor>(Tensor::full({4, 1, 1, 1}, 0.2, DType::f64));
  auto rv = std::make_shared<Tensor>(Tensor::full({4, 1, 1, 1}, 1.5, DType::f64));
  return [rm, rv, training](Binding&, std::vector<Var>& v) {
    // Training mode overwrites the running statistics; reset so repeated
    // forward passes stay identical.
    if (training) {
      rm->fill(0.2);
      rv->fill(1.5);
    }
    return ag::batch_norm(v[0], v[1], v[2], *rm, *rv, training);
  };
}

std::vector<OpCase> op_cases() {
  const Shape img{2, 4, 6, 5};
  const Shape mask{2, 1, 5, 4};
  auto targets = std::make_shared<Tensor>([&] {
    std::mt19937_64 rng(77);
    return bernoulli(mask, rng);
  }());
  using V = std::vector<Var>;
  return {
      {"conv2d_dense", {{"x", {2, 3, 6, 5}}, {"w", {4, 3, 3, 3}}, {"b", {4, 1, 1, 1}}},
       [](Binding&, V& v) { return ag::conv2d(v[0], v[1], v[2], ConvSpec::same(3, 4, 3, 3)); }},
      {"conv2d_grouped", {{"x", {2, 4, 6, 5}}, {"w", {6, 2, 3, 3}}},
       [](Binding&, V& v) { return ag::conv2d(v[0], v[1], std::nullopt, ConvSpec::same(4, 6, 3, 3, 2, false)); }},
      {"conv2d_strided", {{"x", {1, 3, 7, 8}}, {"w", {2, 3, 3, 3}}, {"b", {2, 1, 1, 1}}},
       [](Binding&, V& v) { return ag::conv2d(v[0], v[1], v[2], ConvSpec::same(3, 2, 3, 3, 1, true, 2)); }},
      {"conv2d_pointwise", {{"x", {2, 3, 4, 4}}, {"w", {5, 3, 1, 1}}, {"b", {5, 1, 1, 1}}},
       [](Binding&, V& v) { return ag::conv2d(v[0], v[1], v[2], ConvSpec::same(3, 5, 1, 1)); }},
      {"conv2d_depthwise_col", {{"x", img}, {"w", {4, 1, 7, 1}}, {"b", {4, 1, 1, 1}}},
       [](Binding&, V& v) { return ag::conv2d(v[0], v[1], v[2], ConvSpec::depthwise(4, 7, 1)); }},
      {"conv2d_depthwise_row", {{"x", img}, {"w", {4, 1, 1, 5}}},
       [](Binding&, V& v) { return ag::conv2d(v[0], v[1], std::nullopt, ConvSpec::depthwise(4, 1, 5, false)); }},
      {"conv2d_depthwise_5x5", {{"x", img}, {"w", {4, 1, 5, 5}}, {"b", {4, 1, 1, 1}}},
       [](Binding&, V& v) { return ag::conv2d(v[0], v[1], v[2], ConvSpec::depthwise(4, 5, 5)); }},
      {"upsample_nearest", {{"x", img}},
       [](Binding&, V& v) { return ag::upsample(v[0], 2, ops::UpsampleMode::nearest); }},
      {"upsample_bilinear", {{"x", img}},
       [](Binding&, V& v) { return ag::upsample(v[0], 2, ops::UpsampleMode::bilinear); }},
      {"resize_bilinear", {{"x", img}}, [](Binding&, V& v) { return ag::resize_bilinear(v[0], 11, 7); }},
      {"global_avg_pool", {{"x", img}}, [](Binding&, V& v) { return ag::global_avg_pool(v[0]); }},
      {"softmax_axis1", {{"x", {2, 4, 3, 1}}}, [](Binding&, V& v) { return ag::softmax(v[0], 1); }},
      {"softmax_axis3", {{"x", {2, 2, 2, 5}}}, [](Binding&, V& v) { return ag::softmax(v[0], 3); }},
      {"linear", {{"x", {3, 5, 1, 1}}, {"w", {4, 5, 1, 1}}, {"b", {4, 1, 1, 1}}},
       [](Binding&, V& v) { return ag::linear(v[0], v[1], v[2]); }},
      {"add", {{"a", img}, {"b", img}}, [](Binding&, V& v) { return ag::add(v[0], v[1]); }},
      {"sub", {{"a", img}, {"b", img}}, [](Binding&, V& v) { return ag::sub(v[0], v[1]); }},
      {"mul", {{"a", img}, {"b", img}}, [](Binding&, V& v) { return ag::mul(v[0], v[1]); }},
      {"scale", {{"a", img}}, [](Binding&, V& v) { return ag::scale(v[0], -1.7); }},
      {"add_scalar", {{"a", img}}, [](Binding&, V& v) { return ag::add_scalar(v[0], 0.3); }},
      {"scale_channels", {{"x", img}, {"s", {2, 4, 1, 1}}},
       [](Binding&, V& v) { return ag::scale_channels(v[0], v[1]); }},
      {"relu", {{"x", img}}, [](Binding&, V& v) { return ag::relu(v[0]); }},
      {"sigmoid", {{"x", img}}, [](Binding&, V& v) { return ag::sigmoid(v[0]); }, -4, 4},
      {"channel_concat", {{"a", {2, 3, 4, 4}}, {"b", {2, 2, 4, 4}}},
       [](Binding&, V& v) { return ag::channel_concat(v[0], v[1]); }},
      {"concat_axis3", {{"a", {2, 3, 4, 2}}, {"b", {2, 3, 4, 3}}, {"c", {2, 3, 4, 1}}},
       [](Binding&, V& v) { return ag::concat({v[0], v[1], v[2]}, 3); }},
      {"slice", {{"x", img}}, [](Binding&, V& v) { return ag::slice(v[0], 1, 1, 2); }},
      {"split", {{"x", img}},
       [](Binding&, V& v) {
         const auto parts = ag::split(v[0], 1, {1, 2, 1});
         return ag::add(ag::scale(parts[0], 2.0), ag::mul(parts[2], parts[2]));
       }},
      {"reshape", {{"x", img}}, [](Binding&, V& v) { return ag::reshape(v[0], {2, 20, 6, 1}); }},
      {"sum", {{"x", img}}, [](Binding&, V& v) { return ag::sum(v[0]); }},
      {"mean", {{"x", img}}, [](Binding&, V& v) { return ag::mean(v[0]); }},
      {"weighted_sum", {{"a", img}, {"b", img}},
       [](Binding&, V& v) { return ag::weighted_sum({ag::sum(ag::mul(v[0], v[0])), ag::mean(v[1])}, {0.7, -1.3}); }},
      {"batch_norm_train", {{"x", img}, {"g", {4, 1, 1, 1}}, {"beta", {4, 1, 1, 1}}}, batch_norm_case(true)},
      {"batch_norm_eval", {{"x", img}, {"g", {4, 1, 1, 1}}, {"beta", {4, 1, 1, 1}}}, batch_norm_case(false)},
      {"bce_with_logits", {{"z", mask}}, [targets](Binding&, V& v) { return bce_with_logits(v[0], *targets); }, -3,
       3},
      {"dice_loss", {{"p", mask}}, [targets](Binding&, V& v) { return dice_loss(v[0], *targets); }, 0.05, 0.95},
  };
}

}  // namespace

std::vector<GradCheckCase> op_gradcheck_suite(std::uint64_t seed) {
  std::vector<GradCheckCase> out;
  for (const auto& c : op_cases()) {
    seed += 7;
    out.push_back({c.name, check_op(c, seed), kOpGradTolerance});
  }
  return out;
}

GradCheckCase model_gradcheck(const CrinConfig& config, std::int64_t size, std::uint64_t seed,
                              std::int64_t coords_per_param) {
  Model m(ModelKind::full_crin, config, seed, DType::f64);
  std::mt19937_64 rng(seed + 1);
  const Tensor x = uniform({1, config.in_channels, size, size}, rng);
  const Tensor yb = bernoulli({1, 1, size, size}, rng), yr = bernoulli({1, 1, size, size}, rng);
  LossProgram fn = [&](Binding& b) {
    return total_loss(b.tape(), m, m.forward(b, b.tape().constant(x)), yb, yr).total;
  };
  GradCheckOptions opt;
  opt.eps = 1e-5;
  opt.max_coords_per_param = coords_per_param;
  opt.seed = seed;
  const char* attn = config.attention == AttentionMlp::dense ? "dense" : "per_space";
  return {fmt::format("full_crin_{}_{}px", attn, size), grad_check(fn, m.params(), opt), kModelGradTolerance};
}

std::string gradcheck_summary(const std::vector<GradCheckCase>& cases) {
  std::string out = "case,params,tolerance,max_rel_err,result\n";
  std::string failures;
  for (const auto& c : cases) {
    out += fmt::format("{},{},{:.0e},{:.3e},{}\n", c.name, c.report.params.size(), c.tolerance, c.report.max_rel_err(),
                       c.passed() ? "PASS" : "FAIL");
    if (!c.passed()) failures += fmt::format("\n# {}\n{}", c.name, c.report.csv());
  }
  return out + failures;
}

}  // namespace crin
