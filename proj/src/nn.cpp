#include "crin/nn.hpp"

#include <cmath>

namespace crin::nn {

Tensor he_uniform(Shape shape, std::int64_t fan_in, std::mt19937_64& rng, DType dtype) {
  const double bound = std::sqrt(6.0 / static_cast<double>(std::max<std::int64_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(shape, dtype);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, dist(rng));
  return t;
}

Conv Conv::make(ParamStore& params, std::string name, const ConvSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  const std::int64_t fan_in = spec.in_channels / spec.groups * spec.kernel_h * spec.kernel_w;
  params.add(name + ".weight", he_uniform(spec.weight_shape(), fan_in, rng, params.dtype()));
  if (spec.has_bias) params.add(name + ".bias", Tensor({spec.out_channels, 1, 1, 1}, params.dtype()));
  return Conv{std::move(name), spec};
}

Var Conv::operator()(Binding& b, Var x) const {
  Scope scope(b.tape(), name);
  std::optional<Var> bias;
  if (spec.has_bias) bias = b.param(name + ".bias");
  return ag::conv2d(x, b.param(name + ".weight"), bias, spec);
}

BatchNorm BatchNorm::make(ParamStore& params, std::string name, std::int64_t channels) {
  const Shape s{channels, 1, 1, 1};
  params.add(name + ".gamma", Tensor::full(s, 1.0, params.dtype()));
  params.add(name + ".beta", Tensor(s, params.dtype()));
  params.add(name + ".running_mean", Tensor(s, params.dtype()), false);
  params.add(name + ".running_var", Tensor::full(s, 1.0, params.dtype()), false);
  return BatchNorm{std::move(name), channels};
}

Var BatchNorm::operator()(Binding& b, Var x) const {
  Scope scope(b.tape(), name);
  return ag::batch_norm(x, b.param(name + ".gamma"), b.param(name + ".beta"), b.buffer(name + ".running_mean"),
                        b.buffer(name + ".running_var"), b.training());
}

ConvBnRelu ConvBnRelu::make(ParamStore& params, const std::string& name, ConvSpec spec, std::mt19937_64& rng) {
  spec.has_bias = false;
  Conv conv = Conv::make(params, name + ".conv", spec, rng);
  BatchNorm bn = BatchNorm::make(params, name + ".bn", spec.out_channels);
  return ConvBnRelu{std::move(conv), std::move(bn)};
}

Var ConvBnRelu::operator()(Binding& b, Var x) const {
  Var y = bn(b, conv(b, x));
  Scope scope(b.tape(), bn.name);
  return ag::relu(y);
}

Linear Linear::make(ParamStore& params, std::string name, std::int64_t in, std::int64_t out, std::mt19937_64& rng) {
  params.add(name + ".weight", he_uniform({out, in, 1, 1}, in, rng, params.dtype()));
  params.add(name + ".bias", Tensor({out, 1, 1, 1}, params.dtype()));
  return Linear{std::move(name), in, out};
}

Var Linear::operator()(Binding& b, Var x) const {
  Scope scope(b.tape(), name);
  return ag::linear(x, b.param(name + ".weight"), b.param(name + ".bias"));
}

}  // namespace crin::nn
