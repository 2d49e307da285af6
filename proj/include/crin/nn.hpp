#pragma once

// Parameterized layers. Each layer owns a name prefix in a ParamStore and
// reads its tensors through a Binding at forward time.

#include <random>
#include <string>

#include "crin/autograd.hpp"

namespace crin::nn {

/// He-uniform bound sqrt(6 / fan_in).
Tensor he_uniform(Shape shape, std::int64_t fan_in, std::mt19937_64& rng, DType dtype);

struct Conv {
  std::string name;
  ConvSpec spec;

  /// Registers `name.weight` (and `name.bias`, zero-initialized).
  static Conv make(ParamStore& params, std::string name, const ConvSpec& spec, std::mt19937_64& rng);
  Var operator()(Binding& b, Var x) const;
};

struct BatchNorm {
  std::string name;
  std::int64_t channels = 0;

  /// gamma = 1 and beta = 0 are learnable; running statistics are buffers.
  static BatchNorm make(ParamStore& params, std::string name, std::int64_t channels);
  Var operator()(Binding& b, Var x) const;
};

/// Bias-free convolution, batch norm, ReLU.
struct ConvBnRelu {
  Conv conv;
  BatchNorm bn;

  static ConvBnRelu make(ParamStore& params, const std::string& name, ConvSpec spec, std::mt19937_64& rng);
  Var operator()(Binding& b, Var x) const;
  const std::string& name() const { return conv.name; }
};

struct Linear {
  std::string name;
  std::int64_t in = 0;
  std::int64_t out = 0;

  static Linear make(ParamStore& params, std::string name, std::int64_t in, std::int64_t out, std::mt19937_64& rng);
  Var operator()(Binding& b, Var x) const;
};

}  // namespace crin::nn
