#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "wcnn/errors.hpp"

namespace wcnn {

enum class DType : std::uint8_t { f32, f64 };

std::string to_string(DType dtype);
DType parse_dtype(const std::string& name);

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

/// Calls `fn(T{})` with T = float or double according to `dtype`.
template <typename Fn>
decltype(auto) dispatch(DType dtype, Fn&& fn) {
  if (dtype == DType::f32) return fn(float{});
  return fn(double{});
}

/// NCHW dimensions.
struct Shape {
  std::int64_t n = 1;
  std::int64_t c = 1;
  std::int64_t h = 1;
  std::int64_t w = 1;

  std::int64_t numel() const { return n * c * h * w; }
  std::int64_t plane() const { return h * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// Dense 4-D array in NCHW row-major layout (w fastest).
///
/// Copies are deep. A default-constructed tensor is "undefined" and only
/// serves as an empty slot; every defined tensor has all dims >= 1.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, DType dtype = DType::f32);

  static Tensor filled(Shape shape, double value, DType dtype = DType::f32);
  static Tensor from_values(Shape shape, const std::vector<double>& values,
                            DType dtype = DType::f32);
  static Tensor scalar(double value, DType dtype = DType::f32);

  bool defined() const { return !std::holds_alternative<std::monostate>(data_); }
  const Shape& shape() const { return shape_; }
  DType dtype() const { return dtype_; }
  std::int64_t numel() const { return shape_.numel(); }

  template <typename T>
  std::span<T> data() {
    check_type<T>();
    return std::span<T>(std::get<std::vector<T>>(data_));
  }
  template <typename T>
  std::span<const T> data() const {
    check_type<T>();
    return std::span<const T>(std::get<std::vector<T>>(data_));
  }

  std::int64_t offset(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  double at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const;
  void set(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w, double value);
  double flat(std::int64_t i) const;
  void set_flat(std::int64_t i, double value);

  /// Value of a 1x1x1x1 tensor.
  double item() const;

  Tensor zeros_like() const { return Tensor(shape_, dtype_); }
  Tensor cast(DType dtype) const;
  std::vector<double> to_vector() const;
  void fill(double value);

  /// Same data viewed under a new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  /// In-place `this += alpha * other`.
  void add_(const Tensor& other, double alpha = 1.0);
  void scale_(double alpha);

  /// Raw byte view for serialization.
  std::span<const std::byte> bytes() const;
  std::span<std::byte> mutable_bytes();

 private:
  template <typename T>
  void check_type() const {
    if (!defined()) throw ContractError("access to undefined tensor");
    if (dtype_ != dtype_of<T>())
      throw ContractError("tensor dtype is " + to_string(dtype_) + ", requested " +
                          to_string(dtype_of<T>()));
  }

  Shape shape_{};
  DType dtype_ = DType::f32;
  std::variant<std::monostate, std::vector<float>, std::vector<double>> data_;
};

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op);
void check_same_shape(const Tensor& a, const Tensor& b, const char* op);

/// Sum of elementwise products, accumulated in double.
double dot(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& a);
bool bitwise_equal(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& a);

/// Per-pixel integer class map of dims (n, h, w).
struct LabelMap {
  std::int64_t n = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;
  std::vector<std::int32_t> data;

  LabelMap() = default;
  LabelMap(std::int64_t n, std::int64_t h, std::int64_t w, std::int32_t value = 0)
      : n(n), h(h), w(w), data(static_cast<std::size_t>(n * h * w), value) {}

  std::int32_t& at(std::int64_t b, std::int64_t y, std::int64_t x) {
    return data[static_cast<std::size_t>((b * h + y) * w + x)];
  }
  std::int32_t at(std::int64_t b, std::int64_t y, std::int64_t x) const {
    return data[static_cast<std::size_t>((b * h + y) * w + x)];
  }
  bool operator==(const LabelMap&) const = default;
};

}  // namespace wcnn
