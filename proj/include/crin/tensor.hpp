#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

namespace crin {

/// Error raised for any violated shape, layout or argument contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

const char* dtype_name(DType dtype);

/// Invokes `fn.template operator()<T>()` with T = float or double.
template <typename Fn>
decltype(auto) dispatch(DType dtype, Fn&& fn) {
  if (dtype == DType::f64) return fn.template operator()<double>();
  return fn.template operator()<float>();
}

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, double> ? DType::f64 : DType::f32;
}

struct Shape {
  std::int64_t n = 0;
  std::int64_t c = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;

  std::int64_t numel() const { return n * c * h * w; }
  std::int64_t operator[](int axis) const;
  std::int64_t& operator[](int axis);
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// Dense NCHW array. Copies are deep; moves are cheap.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, DType dtype = DType::f32);

  static Tensor zeros(Shape shape, DType dtype = DType::f32) { return Tensor(shape, dtype); }
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  template <typename T>
  static Tensor from(Shape shape, const std::vector<T>& values);
  static Tensor from_list(Shape shape, std::initializer_list<double> values, DType dtype = DType::f32);

  const Shape& shape() const { return shape_; }
  DType dtype() const { return dtype_; }
  std::int64_t numel() const { return shape_.numel(); }
  bool empty() const { return numel() == 0; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool value) { requires_grad_ = value; }

  template <typename T>
  std::span<T> data() {
    check_dtype(dtype_of<T>());
    return std::get<std::vector<T>>(storage_);
  }
  template <typename T>
  std::span<const T> data() const {
    check_dtype(dtype_of<T>());
    return std::get<std::vector<T>>(storage_);
  }

  double at(std::int64_t flat) const;
  double at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const;
  void set(std::int64_t flat, double value);
  void set(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w, double value);
  std::int64_t offset(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;
  Tensor to(DType dtype) const;
  void fill(double value);
  std::vector<double> to_vector() const;

  bool all_finite() const;
  /// Bitwise equality of shape, dtype and payload.
  bool identical(const Tensor& other) const;
  std::span<const std::byte> bytes() const;

 private:
  void check_dtype(DType want) const;

  Shape shape_{};
  DType dtype_ = DType::f32;
  bool requires_grad_ = false;
  std::variant<std::vector<float>, std::vector<double>> storage_;
};

template <typename T>
Tensor Tensor::from(Shape shape, const std::vector<T>& values) {
  if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
    throw ShapeError("Tensor::from: " + std::to_string(values.size()) + " values for shape " + shape.str());
  }
  Tensor t(shape, dtype_of<T>());
  std::copy(values.begin(), values.end(), t.data<T>().begin());
  return t;
}

/// Convolution geometry. Weight layout is (out, in/groups, kernel_h, kernel_w).
struct ConvSpec {
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  std::int64_t kernel_h = 1;
  std::int64_t kernel_w = 1;
  std::int64_t stride = 1;
  std::int64_t pad_h = 0;
  std::int64_t pad_w = 0;
  std::int64_t groups = 1;
  bool has_bias = true;

  /// Odd kernel with "same" padding.
  static ConvSpec same(std::int64_t in, std::int64_t out, std::int64_t kh, std::int64_t kw,
                       std::int64_t groups = 1, bool bias = true, std::int64_t stride = 1);
  static ConvSpec depthwise(std::int64_t channels, std::int64_t kh, std::int64_t kw, bool bias = true);

  bool is_depthwise() const { return groups == in_channels && groups == out_channels; }
  Shape weight_shape() const { return {out_channels, in_channels / groups, kernel_h, kernel_w}; }
  std::int64_t out_h(std::int64_t h) const { return (h + 2 * pad_h - kernel_h) / stride + 1; }
  std::int64_t out_w(std::int64_t w) const { return (w + 2 * pad_w - kernel_w) / stride + 1; }
  void validate() const;
};

}  // namespace crin
