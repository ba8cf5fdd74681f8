#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace qpinqi {

using cplx = std::complex<double>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::size_t shape_count(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

/// Dense row-major array over a fixed element type. The empty shape []
/// denotes a scalar holding exactly one element.
template <typename T>
struct Array {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Array() = default;
  explicit Array(std::vector<std::size_t> s)
      : shape(std::move(s)), data(shape_count(shape), T{}) {}
  Array(std::vector<std::size_t> s, std::vector<T> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape_count(shape))
      throw ShapeError("array data size does not match shape");
  }

  std::size_t size() const { return data.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  std::size_t rank() const { return shape.size(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  // Flat offsets for the common low-rank layouts.
  std::size_t idx(std::size_t i, std::size_t j) const { return i * shape[1] + j; }
  std::size_t idx(std::size_t i, std::size_t j, std::size_t k) const {
    return (i * shape[1] + j) * shape[2] + k;
  }
  std::size_t idx(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return ((i * shape[1] + j) * shape[2] + k) * shape[3] + l;
  }

  T& at(std::size_t i, std::size_t j) { return data[idx(i, j)]; }
  const T& at(std::size_t i, std::size_t j) const { return data[idx(i, j)]; }
  T& at(std::size_t i, std::size_t j, std::size_t k) { return data[idx(i, j, k)]; }
  const T& at(std::size_t i, std::size_t j, std::size_t k) const {
    return data[idx(i, j, k)];
  }
  T& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data[idx(i, j, k, l)];
  }
  const T& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return data[idx(i, j, k, l)];
  }

  bool same_shape(const Array& other) const { return shape == other.shape; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  Array& operator+=(const Array& other) {
    require_same_shape(other, "operator+=");
    for (std::size_t i = 0; i < data.size(); ++i) data[i] += other.data[i];
    return *this;
  }
  Array& operator-=(const Array& other) {
    require_same_shape(other, "operator-=");
    for (std::size_t i = 0; i < data.size(); ++i) data[i] -= other.data[i];
    return *this;
  }
  Array& operator*=(T s) {
    for (auto& v : data) v *= s;
    return *this;
  }

  void require_same_shape(const Array& other, const char* where) const {
    if (!same_shape(other))
      throw ShapeError(std::string("shape mismatch in ") + where);
  }
};

using RealArray = Array<double>;
using ComplexArray = Array<cplx>;
using FloatArray = Array<float>;

/// <a,b> = sum conj(a_i) b_i.
inline cplx inner_product(const ComplexArray& a, const ComplexArray& b) {
  a.require_same_shape(b, "inner_product");
  cplx acc{0.0, 0.0};
  for (std::size_t i = 0; i < a.size(); ++i)
    acc += std::conj(a.data[i]) * b.data[i];
  return acc;
}

inline double inner_product(const RealArray& a, const RealArray& b) {
  a.require_same_shape(b, "inner_product");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a.data[i] * b.data[i];
  return acc;
}

inline double norm2_sq(const ComplexArray& a) {
  double acc = 0.0;
  for (const auto& v : a.data) acc += std::norm(v);
  return acc;
}

inline double norm2_sq(const RealArray& a) {
  double acc = 0.0;
  for (const auto& v : a.data) acc += v * v;
  return acc;
}

template <typename T>
double norm2(const Array<T>& a) {
  return std::sqrt(norm2_sq(a));
}

template <typename T>
void axpy(T alpha, const Array<T>& x, Array<T>& y) {
  x.require_same_shape(y, "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] += alpha * x.data[i];
}

inline void axpy(double alpha, const ComplexArray& x, ComplexArray& y) {
  x.require_same_shape(y, "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] += alpha * x.data[i];
}

template <typename T>
bool all_finite(const Array<T>& a) {
  for (const auto& v : a.data) {
    if constexpr (std::is_same_v<T, cplx>) {
      if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) return false;
    } else {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
  }
  return true;
}

}  // namespace qpinqi
