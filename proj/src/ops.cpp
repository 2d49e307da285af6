#include "crin/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <numeric>
#include <type_traits>
#include <vector>

namespace crin::ops {
namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ShapeError(std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) + " vs " + dtype_name(b.dtype()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
  require_same_dtype(a, b, op);
}

void require_nonempty(const Tensor& x, const char* op) {
  if (x.empty()) throw ShapeError(std::string(op) + ": empty tensor " + x.shape().str());
}

// Floor division that is correct for negative numerators.
std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return -floor_div(-a, b); }

// Output columns [lo, hi] whose input column ox*stride + offset lies in [0, extent).
struct Range {
  std::int64_t lo;
  std::int64_t hi;
};
Range valid_outputs(std::int64_t offset, std::int64_t stride, std::int64_t extent, std::int64_t out_extent) {
  std::int64_t lo = std::max<std::int64_t>(0, ceil_div(-offset, stride));
  std::int64_t hi = std::min<std::int64_t>(out_extent - 1, floor_div(extent - 1 - offset, stride));
  return {lo, hi};
}

void check_conv_args(const Tensor& input, const Tensor& weight, const Tensor* bias, const ConvSpec& spec) {
  spec.validate();
  const Shape& s = input.shape();
  if (s.c != spec.in_channels) {
    throw ShapeError("conv2d: input channels " + std::to_string(s.c) + " != spec.in_channels " +
                     std::to_string(spec.in_channels));
  }
  const Shape ws = spec.weight_shape();
  if (weight.shape() != ws) {
    const char* dims[] = {"out_channels", "in_channels/groups", "kernel_h", "kernel_w"};
    for (int a = 0; a < 4; ++a) {
      if (weight.shape()[a] != ws[a]) {
        throw ShapeError(std::string("conv2d: weight dimension ") + dims[a] + " is " +
                         std::to_string(weight.shape()[a]) + ", expected " + std::to_string(ws[a]) + " (weight " +
                         weight.shape().str() + ")");
      }
    }
  }
  require_same_dtype(input, weight, "conv2d");
  if (bias != nullptr) {
    if (bias->numel() != spec.out_channels) {
      throw ShapeError("conv2d: bias has " + std::to_string(bias->numel()) + " elements, expected out_channels " +
                       std::to_string(spec.out_channels));
    }
    require_same_dtype(input, *bias, "conv2d");
  }
  if (spec.out_h(s.h) <= 0 || spec.out_w(s.w) <= 0) {
    throw ShapeError("conv2d: input " + s.str() + " too small for kernel");
  }
}

template <typename T>
void im2col(const T* x, std::int64_t channels, std::int64_t h, std::int64_t w, const ConvSpec& spec,
            std::int64_t oh, std::int64_t ow, T* cols) {
  const std::int64_t plane = oh * ow;
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < channels; ++c) {
    const T* xc = x + c * h * w;
    for (std::int64_t ky = 0; ky < spec.kernel_h; ++ky) {
      for (std::int64_t kx = 0; kx < spec.kernel_w; ++kx, ++row) {
        T* dst = cols + row * plane;
        const std::int64_t xoff = kx - spec.pad_w;
        const Range r = valid_outputs(xoff, spec.stride, w, ow);
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          T* drow = dst + oy * ow;
          const std::int64_t iy = oy * spec.stride - spec.pad_h + ky;
          if (iy < 0 || iy >= h || r.lo > r.hi) {
            std::fill(drow, drow + ow, T(0));
            continue;
          }
          const T* srow = xc + iy * w;
          std::fill(drow, drow + r.lo, T(0));
          for (std::int64_t ox = r.lo; ox <= r.hi; ++ox) drow[ox] = srow[ox * spec.stride + xoff];
          std::fill(drow + r.hi + 1, drow + ow, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, std::int64_t channels, std::int64_t h, std::int64_t w, const ConvSpec& spec,
            std::int64_t oh, std::int64_t ow, T* x) {
  const std::int64_t plane = oh * ow;
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < channels; ++c) {
    T* xc = x + c * h * w;
    for (std::int64_t ky = 0; ky < spec.kernel_h; ++ky) {
      for (std::int64_t kx = 0; kx < spec.kernel_w; ++kx, ++row) {
        const T* src = cols + row * plane;
        const std::int64_t xoff = kx - spec.pad_w;
        const Range r = valid_outputs(xoff, spec.stride, w, ow);
        if (r.lo > r.hi) continue;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t iy = oy * spec.stride - spec.pad_h + ky;
          if (iy < 0 || iy >= h) continue;
          const T* srow = src + oy * ow;
          T* drow = xc + iy * w;
          for (std::int64_t ox = r.lo; ox <= r.hi; ++ox) drow[ox * spec.stride + xoff] += srow[ox];
        }
      }
    }
  }
}

bool is_pointwise(const ConvSpec& spec) {
  return spec.kernel_h == 1 && spec.kernel_w == 1 && spec.stride == 1 && spec.pad_h == 0 && spec.pad_w == 0;
}

template <typename T>
void depthwise_forward(const T* x, const T* wt, T* y, std::int64_t h, std::int64_t w, const ConvSpec& spec,
                       std::int64_t oh, std::int64_t ow) {
  // 32-bit inputs accumulate in double: a 21x21 kernel sums 441 products.
  using Acc = std::conditional_t<std::is_same_v<T, float>, double, T>;
  thread_local std::vector<Acc> buffer;
  buffer.assign(static_cast<std::size_t>(oh * ow), Acc(0));
  Acc* out = buffer.data();
  for (std::int64_t ky = 0; ky < spec.kernel_h; ++ky) {
    for (std::int64_t kx = 0; kx < spec.kernel_w; ++kx) {
      const Acc wv = wt[ky * spec.kernel_w + kx];
      const std::int64_t xoff = kx - spec.pad_w;
      const Range r = valid_outputs(xoff, spec.stride, w, ow);
      if (r.lo > r.hi) continue;
      for (std::int64_t oy = 0; oy < oh; ++oy) {
        const std::int64_t iy = oy * spec.stride - spec.pad_h + ky;
        if (iy < 0 || iy >= h) continue;
        const T* srow = x + iy * w + xoff;
        Acc* drow = out + oy * ow;
        if (spec.stride == 1) {
          for (std::int64_t ox = r.lo; ox <= r.hi; ++ox) drow[ox] += wv * static_cast<Acc>(srow[ox]);
        } else {
          for (std::int64_t ox = r.lo; ox <= r.hi; ++ox) drow[ox] += wv * static_cast<Acc>(srow[ox * spec.stride]);
        }
      }
    }
  }
  for (std::int64_t i = 0; i < oh * ow; ++i) y[i] += static_cast<T>(out[i]);
}

template <typename T>
void depthwise_backward(const T* x, const T* wt, const T* gy, T* gx, T* gw, std::int64_t h, std::int64_t w,
                        const ConvSpec& spec, std::int64_t oh, std::int64_t ow) {
  // Per-column partial sums keep the weight-gradient reduction vectorizable.
  std::vector<T> partial(gw != nullptr ? static_cast<std::size_t>(ow) : 0);
  const std::int64_t st = spec.stride;
  for (std::int64_t ky = 0; ky < spec.kernel_h; ++ky) {
    for (std::int64_t kx = 0; kx < spec.kernel_w; ++kx) {
      const T wv = wt[ky * spec.kernel_w + kx];
      const std::int64_t xoff = kx - spec.pad_w;
      const Range r = valid_outputs(xoff, st, w, ow);
      if (r.lo > r.hi) continue;
      std::fill(partial.begin(), partial.end(), T(0));
      T* acc = partial.data();
      for (std::int64_t oy = 0; oy < oh; ++oy) {
        const std::int64_t iy = oy * st - spec.pad_h + ky;
        if (iy < 0 || iy >= h) continue;
        const T* grow = gy + oy * ow;
        const std::int64_t base = iy * w + xoff;
        if (gw != nullptr) {
          const T* srow = x + base;
          if (st == 1) {
            for (std::int64_t ox = r.lo; ox <= r.hi; ++ox) acc[ox] += grow[ox] * srow[ox];
          } else {
            for (std::int64_t ox = r.lo; ox <= r.hi; ++ox) acc[ox] += grow[ox] * srow[ox * st];
          }
        }
        if (gx != nullptr) {
          T* drow = gx + base;
          if (st == 1) {
            for (std::int64_t ox = r.lo; ox <= r.hi; ++ox) drow[ox] += wv * grow[ox];
          } else {
            for (std::int64_t ox = r.lo; ox <= r.hi; ++ox) drow[ox * st] += wv * grow[ox];
          }
        }
      }
      if (gw != nullptr) {
        T sum = 0;
        for (std::int64_t ox = r.lo; ox <= r.hi; ++ox) sum += acc[ox];
        gw[ky * spec.kernel_w + kx] += sum;
      }
    }
  }
}

template <typename T>
Tensor conv2d_impl(const Tensor& input, const Tensor& weight, const Tensor* bias, const ConvSpec& spec) {
  const Shape s = input.shape();
  const std::int64_t oh = spec.out_h(s.h), ow = spec.out_w(s.w);
  Tensor out({s.n, spec.out_channels, oh, ow}, input.dtype());
  const T* x = input.data<T>().data();
  const T* wt = weight.data<T>().data();
  T* y = out.data<T>().data();
  const std::int64_t plane = oh * ow;
  const std::int64_t in_plane = s.h * s.w;

  if (spec.is_depthwise()) {
    const std::int64_t taps = spec.kernel_h * spec.kernel_w;
    for (std::int64_t n = 0; n < s.n; ++n) {
      for (std::int64_t c = 0; c < s.c; ++c) {
        depthwise_forward(x + (n * s.c + c) * in_plane, wt + c * taps, y + (n * s.c + c) * plane, s.h, s.w, spec,
                          oh, ow);
      }
    }
  } else {
    const std::int64_t cin_g = spec.in_channels / spec.groups;
    const std::int64_t cout_g = spec.out_channels / spec.groups;
    const std::int64_t k = cin_g * spec.kernel_h * spec.kernel_w;
    const bool pointwise = is_pointwise(spec);
    std::vector<T> cols(pointwise ? 0 : static_cast<std::size_t>(k * plane));
    for (std::int64_t n = 0; n < s.n; ++n) {
      for (std::int64_t g = 0; g < spec.groups; ++g) {
        const T* xg = x + (n * s.c + g * cin_g) * in_plane;
        const T* colp = xg;
        if (!pointwise) {
          im2col(xg, cin_g, s.h, s.w, spec, oh, ow, cols.data());
          colp = cols.data();
        }
        Eigen::Map<const MatR<T>> wm(wt + g * cout_g * k, cout_g, k);
        Eigen::Map<const MatR<T>> cm(colp, k, plane);
        Eigen::Map<MatR<T>> ym(y + (n * spec.out_channels + g * cout_g) * plane, cout_g, plane);
        ym.noalias() = wm * cm;
      }
    }
  }
  if (bias != nullptr) {
    const T* b = bias->data<T>().data();
    for (std::int64_t n = 0; n < s.n; ++n) {
      for (std::int64_t c = 0; c < spec.out_channels; ++c) {
        T* yc = y + (n * spec.out_channels + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) yc[i] += b[c];
      }
    }
  }
  return out;
}

template <typename T>
ConvGrads conv2d_backward_impl(const Tensor& input, const Tensor& weight, const Tensor& grad_out,
                               const ConvSpec& spec, bool need_input, bool need_weight, bool need_bias) {
  const Shape s = input.shape();
  const std::int64_t oh = spec.out_h(s.h), ow = spec.out_w(s.w);
  const Shape want{s.n, spec.out_channels, oh, ow};
  if (grad_out.shape() != want) {
    throw ShapeError("conv2d_backward: grad shape " + grad_out.shape().str() + ", expected " + want.str());
  }
  ConvGrads grads;
  if (need_input) grads.input = Tensor(s, input.dtype());
  if (need_weight) grads.weight = Tensor(weight.shape(), input.dtype());
  if (need_bias) grads.bias = Tensor({spec.out_channels, 1, 1, 1}, input.dtype());

  const T* x = input.data<T>().data();
  const T* wt = weight.data<T>().data();
  const T* gy = grad_out.data<T>().data();
  T* gx = need_input ? grads.input->template data<T>().data() : nullptr;
  T* gw = need_weight ? grads.weight->template data<T>().data() : nullptr;
  const std::int64_t plane = oh * ow;
  const std::int64_t in_plane = s.h * s.w;

  if (need_bias) {
    T* gb = grads.bias->template data<T>().data();
    for (std::int64_t n = 0; n < s.n; ++n) {
      for (std::int64_t c = 0; c < spec.out_channels; ++c) {
        const T* g = gy + (n * spec.out_channels + c) * plane;
        T acc = 0;
        for (std::int64_t i = 0; i < plane; ++i) acc += g[i];
        gb[c] += acc;
      }
    }
  }
  if (!need_input && !need_weight) return grads;

  if (spec.is_depthwise()) {
    const std::int64_t taps = spec.kernel_h * spec.kernel_w;
    for (std::int64_t n = 0; n < s.n; ++n) {
      for (std::int64_t c = 0; c < s.c; ++c) {
        const std::int64_t xo = (n * s.c + c) * in_plane;
        depthwise_backward(x + xo, wt + c * taps, gy + (n * s.c + c) * plane, gx ? gx + xo : nullptr,
                           gw ? gw + c * taps : nullptr, s.h, s.w, spec, oh, ow);
      }
    }
    return grads;
  }

  const std::int64_t cin_g = spec.in_channels / spec.groups;
  const std::int64_t cout_g = spec.out_channels / spec.groups;
  const std::int64_t k = cin_g * spec.kernel_h * spec.kernel_w;
  const bool pointwise = is_pointwise(spec);
  std::vector<T> cols(pointwise ? 0 : static_cast<std::size_t>(k * plane));
  std::vector<T> dcols(pointwise || !need_input ? 0 : static_cast<std::size_t>(k * plane));
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t g = 0; g < spec.groups; ++g) {
      const std::int64_t xo = (n * s.c + g * cin_g) * in_plane;
      Eigen::Map<const MatR<T>> gym(gy + (n * spec.out_channels + g * cout_g) * plane, cout_g, plane);
      Eigen::Map<const MatR<T>> wm(wt + g * cout_g * k, cout_g, k);
      if (need_weight) {
        const T* colp = x + xo;
        if (!pointwise) {
          im2col(x + xo, cin_g, s.h, s.w, spec, oh, ow, cols.data());
          colp = cols.data();
        }
        Eigen::Map<const MatR<T>> cm(colp, k, plane);
        Eigen::Map<MatR<T>> gwm(gw + g * cout_g * k, cout_g, k);
        gwm.noalias() += gym * cm.transpose();
      }
      if (need_input) {
        if (pointwise) {
          Eigen::Map<MatR<T>> gxm(gx + xo, k, plane);
          gxm.noalias() += wm.transpose() * gym;
        } else {
          Eigen::Map<MatR<T>> dcm(dcols.data(), k, plane);
          dcm.noalias() = wm.transpose() * gym;
          col2im(dcols.data(), cin_g, s.h, s.w, spec, oh, ow, gx + xo);
        }
      }
    }
  }
  return grads;
}

struct Taps {
  std::vector<std::int64_t> lo;
  std::vector<std::int64_t> hi;
  std::vector<double> frac;
};

Taps bilinear_taps(std::int64_t in, std::int64_t out) {
  Taps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    t.lo[o] = i0;
    t.hi[o] = std::min(i0 + 1, in - 1);
    t.frac[o] = src - static_cast<double>(i0);
  }
  return t;
}

struct Axes {
  std::int64_t outer;
  std::int64_t len;
  std::int64_t inner;
};

Axes split_axes(const Shape& s, int axis) {
  if (axis < 0 || axis > 3) throw ShapeError("axis " + std::to_string(axis) + " out of range [0, 4)");
  Axes a{1, s[axis], 1};
  for (int i = 0; i < axis; ++i) a.outer *= s[i];
  for (int i = axis + 1; i < 4; ++i) a.inner *= s[i];
  return a;
}

template <typename T, typename Fn>
Tensor map_unary(const Tensor& x, Fn fn) {
  Tensor out(x.shape(), x.dtype());
  auto src = x.data<T>();
  auto dst = out.data<T>();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = fn(src[i]);
  return out;
}

template <typename T, typename Fn>
Tensor map_binary(const Tensor& a, const Tensor& b, Fn fn) {
  Tensor out(a.shape(), a.dtype());
  auto sa = a.data<T>();
  auto sb = b.data<T>();
  auto dst = out.data<T>();
  for (std::size_t i = 0; i < sa.size(); ++i) dst[i] = fn(sa[i], sb[i]);
  return out;
}

void check_bn_args(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& mean,
                   const Tensor& var) {
  const std::int64_t c = x.shape().c;
  for (const Tensor* t : {&gamma, &beta, &mean, &var}) {
    if (t->numel() != c) {
      throw ShapeError("batch_norm: per-channel tensor has " + std::to_string(t->numel()) + " elements, expected " +
                       std::to_string(c));
    }
    require_same_dtype(x, *t, "batch_norm");
  }
  require_nonempty(x, "batch_norm");
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor* bias, const ConvSpec& spec) {
  check_conv_args(input, weight, bias, spec);
  return dispatch(input.dtype(), [&]<typename T>() { return conv2d_impl<T>(input, weight, bias, spec); });
}

ConvGrads conv2d_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out, const ConvSpec& spec,
                          bool need_input, bool need_weight, bool need_bias) {
  check_conv_args(input, weight, nullptr, spec);
  return dispatch(input.dtype(), [&]<typename T>() {
    return conv2d_backward_impl<T>(input, weight, grad_out, spec, need_input, need_weight, need_bias);
  });
}

Tensor resize_bilinear(const Tensor& input, std::int64_t out_h, std::int64_t out_w) {
  require_nonempty(input, "resize_bilinear");
  if (out_h <= 0 || out_w <= 0) throw ShapeError("resize_bilinear: output extent must be positive");
  const Shape s = input.shape();
  const Taps ty = bilinear_taps(s.h, out_h), tx = bilinear_taps(s.w, out_w);
  Tensor out({s.n, s.c, out_h, out_w}, input.dtype());
  dispatch(input.dtype(), [&]<typename T>() {
    const T* x = input.data<T>().data();
    T* y = out.data<T>().data();
    for (std::int64_t p = 0; p < s.n * s.c; ++p) {
      const T* xp = x + p * s.h * s.w;
      T* yp = y + p * out_h * out_w;
      for (std::int64_t oy = 0; oy < out_h; ++oy) {
        const T fy = static_cast<T>(ty.frac[oy]);
        const T* r0 = xp + ty.lo[oy] * s.w;
        const T* r1 = xp + ty.hi[oy] * s.w;
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
          const T fx = static_cast<T>(tx.frac[ox]);
          const T top = (T(1) - fx) * r0[tx.lo[ox]] + fx * r0[tx.hi[ox]];
          const T bot = (T(1) - fx) * r1[tx.lo[ox]] + fx * r1[tx.hi[ox]];
          yp[oy * out_w + ox] = (T(1) - fy) * top + fy * bot;
        }
      }
    }
  });
  return out;
}

Tensor resize_bilinear_backward(const Tensor& grad_out, const Shape& input_shape) {
  const Shape g = grad_out.shape();
  const Taps ty = bilinear_taps(input_shape.h, g.h), tx = bilinear_taps(input_shape.w, g.w);
  Tensor out(input_shape, grad_out.dtype());
  dispatch(grad_out.dtype(), [&]<typename T>() {
    const T* gy = grad_out.data<T>().data();
    T* gx = out.data<T>().data();
    const std::int64_t in_plane = input_shape.h * input_shape.w;
    for (std::int64_t p = 0; p < g.n * g.c; ++p) {
      const T* gp = gy + p * g.h * g.w;
      T* xp = gx + p * in_plane;
      for (std::int64_t oy = 0; oy < g.h; ++oy) {
        const T fy = static_cast<T>(ty.frac[oy]);
        T* r0 = xp + ty.lo[oy] * input_shape.w;
        T* r1 = xp + ty.hi[oy] * input_shape.w;
        for (std::int64_t ox = 0; ox < g.w; ++ox) {
          const T fx = static_cast<T>(tx.frac[ox]);
          const T v = gp[oy * g.w + ox];
          r0[tx.lo[ox]] += (T(1) - fy) * (T(1) - fx) * v;
          r0[tx.hi[ox]] += (T(1) - fy) * fx * v;
          r1[tx.lo[ox]] += fy * (T(1) - fx) * v;
          r1[tx.hi[ox]] += fy * fx * v;
        }
      }
    }
  });
  return out;
}

Tensor upsample(const Tensor& input, int factor, UpsampleMode mode) {
  require_nonempty(input, "upsample");
  if (factor < 1) throw ShapeError("upsample: factor must be >= 1");
  const Shape s = input.shape();
  if (mode == UpsampleMode::bilinear) return resize_bilinear(input, s.h * factor, s.w * factor);
  Tensor out({s.n, s.c, s.h * factor, s.w * factor}, input.dtype());
  dispatch(input.dtype(), [&]<typename T>() {
    const T* x = input.data<T>().data();
    T* y = out.data<T>().data();
    const std::int64_t ow = s.w * factor;
    for (std::int64_t p = 0; p < s.n * s.c; ++p) {
      for (std::int64_t oy = 0; oy < s.h * factor; ++oy) {
        const T* src = x + (p * s.h + oy / factor) * s.w;
        T* dst = y + (p * s.h * factor + oy) * ow;
        for (std::int64_t ox = 0; ox < ow; ++ox) dst[ox] = src[ox / factor];
      }
    }
  });
  return out;
}

Tensor upsample_backward(const Tensor& grad_out, const Shape& input_shape, int factor, UpsampleMode mode) {
  if (mode == UpsampleMode::bilinear) return resize_bilinear_backward(grad_out, input_shape);
  Tensor out(input_shape, grad_out.dtype());
  const Shape g = grad_out.shape();
  dispatch(grad_out.dtype(), [&]<typename T>() {
    const T* gy = grad_out.data<T>().data();
    T* gx = out.data<T>().data();
    for (std::int64_t p = 0; p < g.n * g.c; ++p) {
      for (std::int64_t oy = 0; oy < g.h; ++oy) {
        const T* src = gy + (p * g.h + oy) * g.w;
        T* dst = gx + (p * input_shape.h + oy / factor) * input_shape.w;
        for (std::int64_t ox = 0; ox < g.w; ++ox) dst[ox / factor] += src[ox];
      }
    }
  });
  return out;
}

Tensor global_avg_pool(const Tensor& input) {
  const Shape s = input.shape();
  if (s.h * s.w < 1) throw ShapeError("global_avg_pool: empty spatial extent in " + s.str());
  Tensor out({s.n, s.c, 1, 1}, input.dtype());
  dispatch(input.dtype(), [&]<typename T>() {
    const T* x = input.data<T>().data();
    T* y = out.data<T>().data();
    const std::int64_t plane = s.h * s.w;
    for (std::int64_t p = 0; p < s.n * s.c; ++p) {
      double acc = 0;
      for (std::int64_t i = 0; i < plane; ++i) acc += x[p * plane + i];
      y[p] = static_cast<T>(acc / static_cast<double>(plane));
    }
  });
  return out;
}

Tensor global_avg_pool_backward(const Tensor& grad_out, const Shape& input_shape) {
  Tensor out(input_shape, grad_out.dtype());
  dispatch(grad_out.dtype(), [&]<typename T>() {
    const T* g = grad_out.data<T>().data();
    T* x = out.data<T>().data();
    const std::int64_t plane = input_shape.h * input_shape.w;
    const T inv = T(1) / static_cast<T>(plane);
    for (std::int64_t p = 0; p < input_shape.n * input_shape.c; ++p) {
      std::fill(x + p * plane, x + (p + 1) * plane, g[p] * inv);
    }
  });
  return out;
}

Tensor softmax(const Tensor& input, int axis) {
  const Axes a = split_axes(input.shape(), axis);
  Tensor out(input.shape(), input.dtype());
  dispatch(input.dtype(), [&]<typename T>() {
    const T* x = input.data<T>().data();
    T* y = out.data<T>().data();
    for (std::int64_t o = 0; o < a.outer; ++o) {
      for (std::int64_t j = 0; j < a.inner; ++j) {
        const std::int64_t base = o * a.len * a.inner + j;
        T mx = x[base];
        for (std::int64_t i = 1; i < a.len; ++i) mx = std::max(mx, x[base + i * a.inner]);
        T total = 0;
        for (std::int64_t i = 0; i < a.len; ++i) {
          const T e = std::exp(x[base + i * a.inner] - mx);
          y[base + i * a.inner] = e;
          total += e;
        }
        for (std::int64_t i = 0; i < a.len; ++i) y[base + i * a.inner] /= total;
      }
    }
  });
  return out;
}

Tensor softmax_backward(const Tensor& output, const Tensor& grad_out, int axis) {
  require_same_shape(output, grad_out, "softmax_backward");
  const Axes a = split_axes(output.shape(), axis);
  Tensor out(output.shape(), output.dtype());
  dispatch(output.dtype(), [&]<typename T>() {
    const T* y = output.data<T>().data();
    const T* g = grad_out.data<T>().data();
    T* gx = out.data<T>().data();
    for (std::int64_t o = 0; o < a.outer; ++o) {
      for (std::int64_t j = 0; j < a.inner; ++j) {
        const std::int64_t base = o * a.len * a.inner + j;
        T dot = 0;
        for (std::int64_t i = 0; i < a.len; ++i) dot += y[base + i * a.inner] * g[base + i * a.inner];
        for (std::int64_t i = 0; i < a.len; ++i) {
          const std::int64_t k = base + i * a.inner;
          gx[k] = y[k] * (g[k] - dot);
        }
      }
    }
  });
  return out;
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor* bias) {
  const Shape s = input.shape();
  const Shape ws = weight.shape();
  if (s.h != 1 || s.w != 1) throw ShapeError("linear: input must be flat (N,D,1,1), got " + s.str());
  if (ws.h != 1 || ws.w != 1 || ws.c != s.c) {
    throw ShapeError("linear: weight " + ws.str() + " does not match input dimension D=" + std::to_string(s.c));
  }
  require_same_dtype(input, weight, "linear");
  if (bias != nullptr && bias->numel() != ws.n) {
    throw ShapeError("linear: bias has " + std::to_string(bias->numel()) + " elements, expected " +
                     std::to_string(ws.n));
  }
  Tensor out({s.n, ws.n, 1, 1}, input.dtype());
  dispatch(input.dtype(), [&]<typename T>() {
    Eigen::Map<const MatR<T>> xm(input.data<T>().data(), s.n, s.c);
    Eigen::Map<const MatR<T>> wm(weight.data<T>().data(), ws.n, ws.c);
    Eigen::Map<MatR<T>> ym(out.data<T>().data(), s.n, ws.n);
    ym.noalias() = xm * wm.transpose();
    if (bias != nullptr) {
      Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bm(bias->data<T>().data(), ws.n);
      ym.rowwise() += bm;
    }
  });
  return out;
}

LinearGrads linear_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out, bool need_input,
                            bool need_weight, bool need_bias) {
  const Shape s = input.shape();
  const Shape ws = weight.shape();
  LinearGrads grads;
  dispatch(input.dtype(), [&]<typename T>() {
    Eigen::Map<const MatR<T>> xm(input.data<T>().data(), s.n, s.c);
    Eigen::Map<const MatR<T>> wm(weight.data<T>().data(), ws.n, ws.c);
    Eigen::Map<const MatR<T>> gm(grad_out.data<T>().data(), s.n, ws.n);
    if (need_input) {
      grads.input = Tensor(s, input.dtype());
      Eigen::Map<MatR<T>> gx(grads.input->template data<T>().data(), s.n, s.c);
      gx.noalias() = gm * wm;
    }
    if (need_weight) {
      grads.weight = Tensor(ws, input.dtype());
      Eigen::Map<MatR<T>> gw(grads.weight->template data<T>().data(), ws.n, ws.c);
      gw.noalias() = gm.transpose() * xm;
    }
    if (need_bias) {
      grads.bias = Tensor({ws.n, 1, 1, 1}, input.dtype());
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb(grads.bias->template data<T>().data(), ws.n);
      gb = gm.colwise().sum();
    }
  });
  return grads;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  return dispatch(a.dtype(), [&]<typename T>() { return map_binary<T>(a, b, [](T x, T y) { return x + y; }); });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  return dispatch(a.dtype(), [&]<typename T>() { return map_binary<T>(a, b, [](T x, T y) { return x - y; }); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  return dispatch(a.dtype(), [&]<typename T>() { return map_binary<T>(a, b, [](T x, T y) { return x * y; }); });
}

Tensor scale(const Tensor& a, double alpha) {
  return dispatch(a.dtype(), [&]<typename T>() {
    const T s = static_cast<T>(alpha);
    return map_unary<T>(a, [s](T x) { return x * s; });
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  return dispatch(a.dtype(), [&]<typename T>() {
    const T s = static_cast<T>(value);
    return map_unary<T>(a, [s](T x) { return x + s; });
  });
}

Tensor scale_channels(const Tensor& x, const Tensor& s) {
  const Shape xs = x.shape();
  if (s.shape() != Shape{xs.n, xs.c, 1, 1}) {
    throw ShapeError("scale_channels: factors " + s.shape().str() + " do not match " + xs.str());
  }
  require_same_dtype(x, s, "scale_channels");
  Tensor out(xs, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    const T* xp = x.data<T>().data();
    const T* sp = s.data<T>().data();
    T* y = out.data<T>().data();
    const std::int64_t plane = xs.h * xs.w;
    for (std::int64_t p = 0; p < xs.n * xs.c; ++p) {
      for (std::int64_t i = 0; i < plane; ++i) y[p * plane + i] = xp[p * plane + i] * sp[p];
    }
  });
  return out;
}

Tensor relu(const Tensor& x) {
  return dispatch(x.dtype(), [&]<typename T>() {
    return map_unary<T>(x, [](T v) { return v > 0 || std::isnan(v) ? v : T(0); });
  });
}

Tensor relu_backward(const Tensor& x, const Tensor& grad_out) {
  require_same_shape(x, grad_out, "relu_backward");
  return dispatch(x.dtype(), [&]<typename T>() {
    return map_binary<T>(x, grad_out, [](T v, T g) { return v > 0 ? g : T(0); });
  });
}

Tensor sigmoid(const Tensor& x) {
  return dispatch(x.dtype(), [&]<typename T>() {
    return map_unary<T>(x, [](T v) {
      if (v >= 0) return T(1) / (T(1) + std::exp(-v));
      const T e = std::exp(v);
      return e / (T(1) + e);
    });
  });
}

Tensor sigmoid_backward(const Tensor& y, const Tensor& grad_out) {
  require_same_shape(y, grad_out, "sigmoid_backward");
  return dispatch(y.dtype(), [&]<typename T>() {
    return map_binary<T>(y, grad_out, [](T s, T g) { return g * s * (T(1) - s); });
  });
}

double sum(const Tensor& x) {
  return dispatch(x.dtype(), [&]<typename T>() {
    double acc = 0;
    for (T v : x.data<T>()) acc += v;
    return acc;
  });
}

void accumulate(Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "accumulate");
  dispatch(a.dtype(), [&]<typename T>() {
    auto da = a.data<T>();
    auto db = b.data<T>();
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += db[i];
  });
}

Tensor concat(const std::vector<const Tensor*>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape out_shape = parts.front()->shape();
  out_shape[axis] = 0;
  for (const Tensor* p : parts) {
    for (int a = 0; a < 4; ++a) {
      if (a != axis && p->shape()[a] != parts.front()->shape()[a]) {
        throw ShapeError("concat: layout mismatch on axis " + std::to_string(a) + ": " + p->shape().str() + " vs " +
                         parts.front()->shape().str());
      }
    }
    require_same_dtype(*parts.front(), *p, "concat");
    out_shape[axis] += p->shape()[axis];
  }
  Tensor out(out_shape, parts.front()->dtype());
  const Axes oa = split_axes(out_shape, axis);
  dispatch(out.dtype(), [&]<typename T>() {
    T* y = out.data<T>().data();
    std::int64_t start = 0;
    for (const Tensor* p : parts) {
      const Axes pa = split_axes(p->shape(), axis);
      const T* x = p->data<T>().data();
      const std::int64_t chunk = pa.len * pa.inner;
      for (std::int64_t o = 0; o < oa.outer; ++o) {
        std::copy(x + o * chunk, x + (o + 1) * chunk, y + o * oa.len * oa.inner + start * oa.inner);
      }
      start += pa.len;
    }
  });
  return out;
}

Tensor channel_concat(const Tensor& a, const Tensor& b) { return concat({&a, &b}, 1); }

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t len) {
  const Axes a = split_axes(x.shape(), axis);
  if (start < 0 || len < 0 || start + len > a.len) {
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") outside axis extent " + std::to_string(a.len));
  }
  Shape s = x.shape();
  s[axis] = len;
  Tensor out(s, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    const T* src = x.data<T>().data();
    T* dst = out.data<T>().data();
    const std::int64_t chunk = len * a.inner;
    for (std::int64_t o = 0; o < a.outer; ++o) {
      const T* from = src + (o * a.len + start) * a.inner;
      std::copy(from, from + chunk, dst + o * chunk);
    }
  });
  return out;
}

std::vector<Tensor> split(const Tensor& x, int axis, const std::vector<std::int64_t>& sizes) {
  const std::int64_t total = std::accumulate(sizes.begin(), sizes.end(), std::int64_t{0});
  if (total != x.shape()[axis]) {
    throw ShapeError("split: sizes sum to " + std::to_string(total) + " but axis " + std::to_string(axis) +
                     " has extent " + std::to_string(x.shape()[axis]));
  }
  std::vector<Tensor> out;
  std::int64_t start = 0;
  for (std::int64_t len : sizes) {
    out.push_back(slice(x, axis, start, len));
    start += len;
  }
  return out;
}

std::pair<Tensor, Tensor> channel_split(const Tensor& x, std::int64_t first_channels) {
  auto parts = split(x, 1, {first_channels, x.shape().c - first_channels});
  return {std::move(parts[0]), std::move(parts[1])};
}

Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                        Tensor& running_var, const BatchNormParams& params, BatchNormCache* cache) {
  check_bn_args(x, gamma, beta, running_mean, running_var);
  const Shape s = x.shape();
  Tensor out(s, x.dtype());
  Tensor xhat(s, x.dtype());
  Tensor inv_std({1, s.c, 1, 1}, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    const T* xp = x.data<T>().data();
    const T* gp = gamma.data<T>().data();
    const T* bp = beta.data<T>().data();
    T* rm = running_mean.data<T>().data();
    T* rv = running_var.data<T>().data();
    T* y = out.data<T>().data();
    T* xh = xhat.data<T>().data();
    T* is = inv_std.data<T>().data();
    const std::int64_t plane = s.h * s.w;
    const auto count = static_cast<double>(s.n * plane);
    for (std::int64_t c = 0; c < s.c; ++c) {
      double mean = 0;
      for (std::int64_t n = 0; n < s.n; ++n) {
        const T* p = xp + (n * s.c + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) mean += p[i];
      }
      mean /= count;
      double var = 0;
      for (std::int64_t n = 0; n < s.n; ++n) {
        const T* p = xp + (n * s.c + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          const double d = p[i] - mean;
          var += d * d;
        }
      }
      var /= count;
      const double inv = 1.0 / std::sqrt(var + params.eps);
      is[c] = static_cast<T>(inv);
      for (std::int64_t n = 0; n < s.n; ++n) {
        const std::int64_t off = (n * s.c + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          const T h = static_cast<T>((xp[off + i] - mean) * inv);
          xh[off + i] = h;
          y[off + i] = gp[c] * h + bp[c];
        }
      }
      const double unbiased = count > 1 ? var * count / (count - 1) : var;
      rm[c] = static_cast<T>((1 - params.momentum) * rm[c] + params.momentum * mean);
      rv[c] = static_cast<T>((1 - params.momentum) * rv[c] + params.momentum * unbiased);
    }
  });
  if (cache != nullptr) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& running_mean,
                       const Tensor& running_var, const BatchNormParams& params) {
  check_bn_args(x, gamma, beta, running_mean, running_var);
  const Shape s = x.shape();
  Tensor out(s, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    const T* xp = x.data<T>().data();
    const T* gp = gamma.data<T>().data();
    const T* bp = beta.data<T>().data();
    const T* rm = running_mean.data<T>().data();
    const T* rv = running_var.data<T>().data();
    T* y = out.data<T>().data();
    const std::int64_t plane = s.h * s.w;
    for (std::int64_t c = 0; c < s.c; ++c) {
      const T a = static_cast<T>(gp[c] / std::sqrt(static_cast<double>(rv[c]) + params.eps));
      const T b = bp[c] - a * rm[c];
      for (std::int64_t n = 0; n < s.n; ++n) {
        const std::int64_t off = (n * s.c + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) y[off + i] = a * xp[off + i] + b;
      }
    }
  });
  return out;
}

BatchNormGrads batch_norm_train_backward(const Tensor& grad_out, const Tensor& gamma, const BatchNormCache& cache) {
  const Shape s = grad_out.shape();
  BatchNormGrads grads{Tensor(s, grad_out.dtype()), Tensor({s.c, 1, 1, 1}, grad_out.dtype()),
                       Tensor({s.c, 1, 1, 1}, grad_out.dtype())};
  dispatch(grad_out.dtype(), [&]<typename T>() {
    const T* g = grad_out.data<T>().data();
    const T* xh = cache.normalized.data<T>().data();
    const T* is = cache.inv_std.data<T>().data();
    const T* gp = gamma.data<T>().data();
    T* gx = grads.input.data<T>().data();
    T* gg = grads.gamma.data<T>().data();
    T* gb = grads.beta.data<T>().data();
    const std::int64_t plane = s.h * s.w;
    const auto count = static_cast<double>(s.n * plane);
    for (std::int64_t c = 0; c < s.c; ++c) {
      double sum_g = 0, sum_gx = 0;
      for (std::int64_t n = 0; n < s.n; ++n) {
        const std::int64_t off = (n * s.c + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          sum_g += g[off + i];
          sum_gx += static_cast<double>(g[off + i]) * xh[off + i];
        }
      }
      gg[c] = static_cast<T>(sum_gx);
      gb[c] = static_cast<T>(sum_g);
      const double k = static_cast<double>(gp[c]) * is[c] / count;
      for (std::int64_t n = 0; n < s.n; ++n) {
        const std::int64_t off = (n * s.c + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          gx[off + i] = static_cast<T>(k * (count * g[off + i] - sum_g - xh[off + i] * sum_gx));
        }
      }
    }
  });
  return grads;
}

BatchNormGrads batch_norm_eval_backward(const Tensor& x, const Tensor& grad_out, const Tensor& gamma,
                                        const Tensor& running_mean, const Tensor& running_var,
                                        const BatchNormParams& params) {
  const Shape s = x.shape();
  BatchNormGrads grads{Tensor(s, x.dtype()), Tensor({s.c, 1, 1, 1}, x.dtype()), Tensor({s.c, 1, 1, 1}, x.dtype())};
  dispatch(x.dtype(), [&]<typename T>() {
    const T* xp = x.data<T>().data();
    const T* g = grad_out.data<T>().data();
    const T* gp = gamma.data<T>().data();
    const T* rm = running_mean.data<T>().data();
    const T* rv = running_var.data<T>().data();
    T* gx = grads.input.data<T>().data();
    T* gg = grads.gamma.data<T>().data();
    T* gb = grads.beta.data<T>().data();
    const std::int64_t plane = s.h * s.w;
    for (std::int64_t c = 0; c < s.c; ++c) {
      const double inv = 1.0 / std::sqrt(static_cast<double>(rv[c]) + params.eps);
      double sum_g = 0, sum_gx = 0;
      for (std::int64_t n = 0; n < s.n; ++n) {
        const std::int64_t off = (n * s.c + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          sum_g += g[off + i];
          sum_gx += g[off + i] * (xp[off + i] - rm[c]) * inv;
          gx[off + i] = static_cast<T>(gp[c] * inv * g[off + i]);
        }
      }
      gg[c] = static_cast<T>(sum_gx);
      gb[c] = static_cast<T>(sum_g);
    }
  });
  return grads;
}

}  // namespace crin::ops
