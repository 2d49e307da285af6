#pragma once

// Shared helpers for the unit suites: seeded tensor generators and brute-force
// reference kernels that are deliberately independent of src/ops.cpp.

#include <cmath>
#include <random>

#include "crin/tensor.hpp"

namespace crin::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, DType dtype = DType::f32, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(shape, dtype);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, dist(rng));
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

/// Seven-loop direct convolution in double precision.
inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, const Tensor* b, const ConvSpec& s) {
  const Shape xs = x.shape();
  const std::int64_t oh = (xs.h + 2 * s.pad_h - s.kernel_h) / s.stride + 1;
  const std::int64_t ow = (xs.w + 2 * s.pad_w - s.kernel_w) / s.stride + 1;
  const std::int64_t cin_g = s.in_channels / s.groups, cout_g = s.out_channels / s.groups;
  Tensor y({xs.n, s.out_channels, oh, ow}, x.dtype());
  for (std::int64_t n = 0; n < xs.n; ++n)
    for (std::int64_t co = 0; co < s.out_channels; ++co) {
      const std::int64_t g = co / cout_g;
      for (std::int64_t oy = 0; oy < oh; ++oy)
        for (std::int64_t ox = 0; ox < ow; ++ox) {
          double acc = b ? b->at(co) : 0.0;
          for (std::int64_t ci = 0; ci < cin_g; ++ci)
            for (std::int64_t ky = 0; ky < s.kernel_h; ++ky)
              for (std::int64_t kx = 0; kx < s.kernel_w; ++kx) {
                const std::int64_t iy = oy * s.stride - s.pad_h + ky, ix = ox * s.stride - s.pad_w + kx;
                if (iy < 0 || iy >= xs.h || ix < 0 || ix >= xs.w) continue;
                acc += x.at(n, g * cin_g + ci, iy, ix) * w.at(co, ci, ky, kx);
              }
          y.set(n, co, oy, ox, acc);
        }
    }
  return y;
}

}  // namespace crin::testing
