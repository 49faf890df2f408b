#include "wcnn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace wcnn {

std::string to_string(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& name) {
  if (name == "f32") return DType::f32;
  if (name == "f64") return DType::f64;
  throw ConfigError("unknown dtype '" + name + "' (expected f32 or f64)");
}

std::string Shape::str() const {
  return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
         std::to_string(w);
}

Tensor::Tensor(Shape shape, DType dtype) : shape_(shape), dtype_(dtype) {
  if (shape.n < 1 || shape.c < 1 || shape.h < 1 || shape.w < 1)
    throw ShapeError("tensor dims must all be >= 1, got " + shape.str());
  const auto count = static_cast<std::size_t>(shape.numel());
  if (dtype == DType::f32)
    data_ = std::vector<float>(count, 0.0f);
  else
    data_ = std::vector<double>(count, 0.0);
}

Tensor Tensor::filled(Shape shape, double value, DType dtype) {
  Tensor t(shape, dtype);
  t.fill(value);
  return t;
}

Tensor Tensor::from_values(Shape shape, const std::vector<double>& values, DType dtype) {
  Tensor t(shape, dtype);
  if (static_cast<std::int64_t>(values.size()) != t.numel())
    throw ShapeError("from_values: " + std::to_string(values.size()) +
                     " values for shape " + shape.str());
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto d = t.data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return filled({1, 1, 1, 1}, value, dtype); }

double Tensor::at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
  return flat(offset(n, c, h, w));
}

void Tensor::set(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w, double value) {
  set_flat(offset(n, c, h, w), value);
}

double Tensor::flat(std::int64_t i) const {
  return dispatch(dtype_, [&](auto tag) -> double {
    return static_cast<double>(data<decltype(tag)>()[static_cast<std::size_t>(i)]);
  });
}

void Tensor::set_flat(std::int64_t i, double value) {
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    data<T>()[static_cast<std::size_t>(i)] = static_cast<T>(value);
  });
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_.str());
  return flat(0);
}

Tensor Tensor::cast(DType dtype) const {
  Tensor out(shape_, dtype);
  dispatch(dtype_, [&](auto src_tag) {
    using S = decltype(src_tag);
    dispatch(dtype, [&](auto dst_tag) {
      using D = decltype(dst_tag);
      auto s = data<S>();
      auto d = out.data<D>();
      std::transform(s.begin(), s.end(), d.begin(), [](S v) { return static_cast<D>(v); });
    });
  });
  return out;
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(static_cast<std::size_t>(numel()));
  dispatch(dtype_, [&](auto tag) {
    auto s = data<decltype(tag)>();
    std::copy(s.begin(), s.end(), out.begin());
  });
  return out;
}

void Tensor::fill(double value) {
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    auto d = data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape.numel() != numel())
    throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
  Tensor out = *this;
  out.shape_ = shape;
  return out;
}

void Tensor::add_(const Tensor& other, double alpha) {
  check_same_shape(*this, other, "add_");
  check_same_dtype(*this, other, "add_");
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    auto d = data<T>();
    auto s = other.data<T>();
    const T a = static_cast<T>(alpha);
    if (alpha == 1.0) {
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
    } else {
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += a * s[i];
    }
  });
}

void Tensor::scale_(double alpha) {
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    for (auto& v : data<T>()) v *= static_cast<T>(alpha);
  });
}

std::span<const std::byte> Tensor::bytes() const {
  return dispatch(dtype_, [&](auto tag) { return std::as_bytes(data<decltype(tag)>()); });
}

std::span<std::byte> Tensor::mutable_bytes() {
  return dispatch(dtype_, [&](auto tag) { return std::as_writable_bytes(data<decltype(tag)>()); });
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype())
    throw ContractError(std::string(op) + ": dtype mixing " + to_string(a.dtype()) + " with " +
                        to_string(b.dtype()));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!(a.shape() == b.shape()))
    throw ShapeError(std::string(op) + ": shape " + a.shape().str() + " vs " + b.shape().str());
}

double dot(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "dot");
  double acc = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) acc += a.flat(i) * b.flat(i);
  return acc;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.flat(i) - b.flat(i)));
  return m;
}

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.flat(i)));
  return m;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape()) || a.dtype() != b.dtype()) return false;
  auto x = a.bytes();
  auto y = b.bytes();
  return x.size() == y.size() && std::memcmp(x.data(), y.data(), x.size()) == 0;
}

bool all_finite(const Tensor& a) {
  for (std::int64_t i = 0; i < a.numel(); ++i)
    if (!std::isfinite(a.flat(i))) return false;
  return true;
}

}  // namespace wcnn
