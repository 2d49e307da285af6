#pragma once

// Forward and backward numerical kernels over NCHW tensors. Everything here is a
// pure function of its arguments except batch_norm_train, which updates the
// running statistics it is handed.

#include <optional>
#include <vector>

#include "crin/tensor.hpp"

namespace crin::ops {

enum class UpsampleMode { nearest, bilinear };

// Convolution (cross-correlation, no kernel flip).
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor* bias, const ConvSpec& spec);

struct ConvGrads {
  std::optional<Tensor> input;
  std::optional<Tensor> weight;
  std::optional<Tensor> bias;
};
ConvGrads conv2d_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out, const ConvSpec& spec,
                          bool need_input, bool need_weight, bool need_bias);

/// Bilinear resize with the align-corners-false convention.
Tensor resize_bilinear(const Tensor& input, std::int64_t out_h, std::int64_t out_w);
Tensor resize_bilinear_backward(const Tensor& grad_out, const Shape& input_shape);

/// Integer-factor upsampling; factor 2 is the decoder's upsample2x.
Tensor upsample(const Tensor& input, int factor, UpsampleMode mode);
Tensor upsample_backward(const Tensor& grad_out, const Shape& input_shape, int factor, UpsampleMode mode);

Tensor global_avg_pool(const Tensor& input);
Tensor global_avg_pool_backward(const Tensor& grad_out, const Shape& input_shape);

Tensor softmax(const Tensor& input, int axis);
Tensor softmax_backward(const Tensor& output, const Tensor& grad_out, int axis);

/// input (N,D,1,1), weight (D_out,D,1,1), bias with D_out elements.
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor* bias);
struct LinearGrads {
  std::optional<Tensor> input;
  std::optional<Tensor> weight;
  std::optional<Tensor> bias;
};
LinearGrads linear_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out, bool need_input,
                            bool need_weight, bool need_bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double alpha);
Tensor add_scalar(const Tensor& a, double value);
/// x (N,C,H,W) times per-(n,c) factors s (N,C,1,1).
Tensor scale_channels(const Tensor& x, const Tensor& s);
Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& x, const Tensor& grad_out);
Tensor sigmoid(const Tensor& x);
Tensor sigmoid_backward(const Tensor& y, const Tensor& grad_out);
double sum(const Tensor& x);

/// Accumulates b into a (a += b).
void accumulate(Tensor& a, const Tensor& b);

Tensor concat(const std::vector<const Tensor*>& parts, int axis);
Tensor channel_concat(const Tensor& a, const Tensor& b);
std::vector<Tensor> split(const Tensor& x, int axis, const std::vector<std::int64_t>& sizes);
std::pair<Tensor, Tensor> channel_split(const Tensor& x, std::int64_t first_channels);
/// Extent [start, start+len) along one axis.
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t len);

struct BatchNormParams {
  double eps = 1e-5;
  double momentum = 0.1;
};

struct BatchNormCache {
  Tensor normalized;  // x_hat
  Tensor inv_std;     // (1,C,1,1)
};

/// Batch statistics over (N,H,W); updates running_mean/var in place.
Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                        Tensor& running_var, const BatchNormParams& params, BatchNormCache* cache);
Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& running_mean,
                       const Tensor& running_var, const BatchNormParams& params);

struct BatchNormGrads {
  Tensor input;
  Tensor gamma;
  Tensor beta;
};
BatchNormGrads batch_norm_train_backward(const Tensor& grad_out, const Tensor& gamma, const BatchNormCache& cache);
BatchNormGrads batch_norm_eval_backward(const Tensor& x, const Tensor& grad_out, const Tensor& gamma,
                                        const Tensor& running_mean, const Tensor& running_var,
                                        const BatchNormParams& params);

}  // namespace crin::ops
