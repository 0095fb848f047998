// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "approxmac/error.hpp"
#include "approxmac/qformat.hpp"

namespace approxmac {

struct Shape {
  std::size_t n = 1, c = 1, h = 1, w = 1;

  std::size_t size() const { return n * c * h * w; }
  std::size_t item_size() const { return c * h * w; }

  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.n) + "," + std::to_string(s.c) + "," + std::to_string(s.h) + "," +
         std::to_string(s.w) + ")";
}

/// Dense NCHW array, row major. T is QNum (fixed-point pipeline) or float
/// (binary32 pipeline).
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{}) : shape_(shape), data_(shape.size(), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw Error(ErrorCode::ShapeMismatch, "payload of " + std::to_string(data_.size()) +
                                                " values does not match shape " + to_string(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T>& values() const { return data_; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) { return data_[index(n, c, h, w)]; }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[index(n, c, h, w)];
  }

  /// Same payload, new extents with an equal element count.
  Tensor reshaped(Shape shape) const { return Tensor(shape, data_); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_{0, 0, 0, 0};
  std::vector<T> data_;
};

// Scalar conversions between pipelines and real values.

template <typename T>
T from_real(double x);

template <>
inline QNum from_real<QNum>(double x) {
  return quantize(x);
}

template <>
inline float from_real<float>(double x) {
  return static_cast<float>(x);
}

inline double real_value(QNum q) { return to_real(q); }
inline double real_value(float f) { return f; }

template <typename T>
Tensor<T> convert_tensor(const Tensor<float>& in) {
  std::vector<T> out;
  out.reserve(in.size());
  for (float v : in.data()) out.push_back(from_real<T>(v));
  return Tensor<T>(in.shape(), std::move(out));
}

template <typename T>
Tensor<double> real_tensor(const Tensor<T>& in) {
  std::vector<double> out;
  out.reserve(in.size());
  for (const T& v : in.data()) out.push_back(real_value(v));
  return Tensor<double>(in.shape(), std::move(out));
}

}  // namespace approxmac
