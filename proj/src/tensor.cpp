#include "crin/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace crin {

const char* dtype_name(DType dtype) { return dtype == DType::f64 ? "f64" : "f32"; }

std::int64_t Shape::operator[](int axis) const {
  switch (axis) {
    case 0: return n;
    case 1: return c;
    case 2: return h;
    case 3: return w;
  }
  throw ShapeError("axis " + std::to_string(axis) + " out of range [0, 4)");
}

std::int64_t& Shape::operator[](int axis) {
  switch (axis) {
    case 0: return n;
    case 1: return c;
    case 2: return h;
    case 3: return w;
  }
  throw ShapeError("axis " + std::to_string(axis) + " out of range [0, 4)");
}

std::string Shape::str() const {
  std::ostringstream os;
  os << "(" << n << "," << c << "," << h << "," << w << ")";
  return os.str();
}

Tensor::Tensor(Shape shape, DType dtype) : shape_(shape), dtype_(dtype) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw ShapeError("negative dimension in shape " + shape.str());
  }
  const auto count = static_cast<std::size_t>(shape.numel());
  if (dtype == DType::f64) {
    storage_ = std::vector<double>(count, 0.0);
  } else {
    storage_ = std::vector<float>(count, 0.0f);
  }
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t(shape, dtype);
  t.fill(value);
  return t;
}

Tensor Tensor::from_list(Shape shape, std::initializer_list<double> values, DType dtype) {
  if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
    throw ShapeError("Tensor::from_list: " + std::to_string(values.size()) + " values for shape " + shape.str());
  }
  Tensor t(shape, dtype);
  std::int64_t i = 0;
  for (double v : values) t.set(i++, v);
  return t;
}

void Tensor::check_dtype(DType want) const {
  if (want != dtype_) {
    throw ShapeError(std::string("dtype mismatch: tensor is ") + dtype_name(dtype_) + ", accessed as " +
                     dtype_name(want));
  }
}

double Tensor::at(std::int64_t flat) const {
  return dispatch(dtype_, [&]<typename T>() { return static_cast<double>(data<T>()[flat]); });
}

double Tensor::at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
  return at(offset(n, c, h, w));
}

void Tensor::set(std::int64_t flat, double value) {
  dispatch(dtype_, [&]<typename T>() { data<T>()[flat] = static_cast<T>(value); });
}

void Tensor::set(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w, double value) {
  set(offset(n, c, h, w), value);
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(shape);
}

Tensor Tensor::reshaped(Shape shape) && {
  if (shape.numel() != numel()) {
    throw ShapeError("reshape " + shape_.str() + " -> " + shape.str() + " changes element count");
  }
  shape_ = shape;
  return std::move(*this);
}

Tensor Tensor::to(DType dtype) const {
  if (dtype == dtype_) return *this;
  Tensor out(shape_, dtype);
  dispatch(dtype_, [&]<typename S>() {
    dispatch(dtype, [&]<typename D>() {
      auto src = data<S>();
      auto dst = out.data<D>();
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<D>(src[i]);
    });
  });
  out.requires_grad_ = requires_grad_;
  return out;
}

void Tensor::fill(double value) {
  dispatch(dtype_, [&]<typename T>() {
    auto d = data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype_, [&]<typename T>() {
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

bool Tensor::all_finite() const {
  return dispatch(dtype_, [&]<typename T>() {
    for (T v : data<T>()) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  });
}

bool Tensor::identical(const Tensor& other) const {
  if (shape_ != other.shape_ || dtype_ != other.dtype_) return false;
  auto a = bytes();
  auto b = other.bytes();
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size()) == 0;
}

std::span<const std::byte> Tensor::bytes() const {
  return dispatch(dtype_, [&]<typename T>() { return std::as_bytes(data<T>()); });
}

ConvSpec ConvSpec::same(std::int64_t in, std::int64_t out, std::int64_t kh, std::int64_t kw, std::int64_t groups,
                        bool bias, std::int64_t stride) {
  ConvSpec s;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel_h = kh;
  s.kernel_w = kw;
  s.stride = stride;
  s.pad_h = (kh - 1) / 2;
  s.pad_w = (kw - 1) / 2;
  s.groups = groups;
  s.has_bias = bias;
  return s;
}

ConvSpec ConvSpec::depthwise(std::int64_t channels, std::int64_t kh, std::int64_t kw, bool bias) {
  return same(channels, channels, kh, kw, channels, bias);
}

void ConvSpec::validate() const {
  if (in_channels <= 0 || out_channels <= 0) throw ShapeError("conv: channel counts must be positive");
  if (kernel_h <= 0 || kernel_w <= 0) throw ShapeError("conv: kernel dims must be positive");
  if (stride <= 0) throw ShapeError("conv: stride must be positive");
  if (pad_h < 0 || pad_w < 0) throw ShapeError("conv: padding must be non-negative");
  if (groups <= 0 || in_channels % groups != 0 || out_channels % groups != 0) {
    throw ShapeError("conv: groups=" + std::to_string(groups) + " must divide in_channels=" +
                     std::to_string(in_channels) + " and out_channels=" + std::to_string(out_channels));
  }
}

}  // namespace crin
