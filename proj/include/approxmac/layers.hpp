// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <type_traits>
#include <vector>

#include "approxmac/error.hpp"
#include "approxmac/multipliers.hpp"
#include "approxmac/parallel.hpp"
#include "approxmac/qformat.hpp"
#include "approxmac/tensor.hpp"

// Layer kernels of the CNN executor. Products go through the multiplier
// handle; accumulation, bias, batch norm, pooling and residual addition are
// exact (fixed-point) or plain binary32 (bfloat16 pipeline).

namespace approxmac {

struct ConvDesc {
  int out_channels = 0;
  int in_channels = 0;
  int kernel_h = 1;
  int kernel_w = 1;
  int stride = 1;
  int pad = 0;
  int groups = 1;
  std::vector<float> weights;  // (out, in / groups, kh, kw)
  std::vector<float> bias;     // out, or empty for no bias

  bool depthwise() const { return groups == in_channels && groups == out_channels; }
  std::size_t weight_count() const {
    return static_cast<std::size_t>(out_channels) * (groups > 0 ? in_channels / groups : 0) * kernel_h * kernel_w;
  }
  friend bool operator==(const ConvDesc&, const ConvDesc&) = default;
};

struct FcDesc {
  int out_features = 0;
  int in_features = 0;
  std::vector<float> weights;  // (out, in)
  std::vector<float> bias;     // out, or empty

  friend bool operator==(const FcDesc&, const FcDesc&) = default;
};

enum class BnPlacement { BeforeActivation, AfterActivation };

struct BNDesc {
  int channels = 0;
  std::vector<float> mean;
  std::vector<float> variance;
  std::vector<float> scale;  // gamma
  std::vector<float> shift;  // beta
  double epsilon = 1e-5;
  BnPlacement placement = BnPlacement::BeforeActivation;

  friend bool operator==(const BNDesc&, const BNDesc&) = default;
};

struct PoolDesc {
  int kernel = 2;
  int stride = 2;
  bool global = false;

  friend bool operator==(const PoolDesc&, const PoolDesc&) = default;
};

/// Per-scalar-type accumulation policy.
template <typename T>
struct Accumulation;

template <>
struct Accumulation<QNum> {
  using Acc = int128_t;

  template <class Kernel>
  static Acc product(const Kernel& k, QNum w, QNum x) {
    return k(w, x).raw;
  }
  static Acc bias(float b) { return QAcc::from_qnum(quantize(b)).raw; }
  static QNum finish(Acc acc, SaturationCounter& sat) {
    const QAcc a{acc};
    if (!within_guard(a)) {
      throw Error(ErrorCode::AccOverflow, "accumulator exceeded the guard-bit budget");
    }
    return narrow(a, sat);
  }
  static QNum weight(float w) { return quantize(w); }
};

template <>
struct Accumulation<float> {
  using Acc = float;

  template <class Kernel>
  static Acc product(const Kernel& k, float w, float x) {
    if constexpr (Kernel::kRealPipeline) {
      return k(w, x);
    } else {
      throw Error(ErrorCode::InvalidSpec, "multiplier requires the fixed-point pipeline");
    }
  }
  static Acc bias(float b) { return b; }
  static float finish(Acc acc, SaturationCounter&) { return acc; }
  static float weight(float w) { return w; }
};

namespace detail {

template <typename T>
std::vector<T> convert_weights(const std::vector<float>& w) {
  std::vector<T> out;
  out.reserve(w.size());
  for (float v : w) out.push_back(Accumulation<T>::weight(v));
  return out;
}

inline void require(bool cond, const std::string& what) {
  if (!cond) throw Error(ErrorCode::ShapeMismatch, what);
}

}  // namespace detail

inline Shape conv_output_shape(const Shape& in, const ConvDesc& d) {
  detail::require(d.groups > 0 && d.in_channels % d.groups == 0 && d.out_channels % d.groups == 0,
                  "channels not divisible by groups");
  detail::require(in.c == static_cast<std::size_t>(d.in_channels),
                  "input has " + std::to_string(in.c) + " channels, conv expects " + std::to_string(d.in_channels));
  detail::require(d.stride > 0 && d.pad >= 0 && d.kernel_h > 0 && d.kernel_w > 0, "invalid conv geometry");
  const long oh = (static_cast<long>(in.h) + 2 * d.pad - d.kernel_h) / d.stride + 1;
  const long ow = (static_cast<long>(in.w) + 2 * d.pad - d.kernel_w) / d.stride + 1;
  detail::require(oh > 0 && ow > 0 && static_cast<long>(in.h) + 2 * d.pad >= d.kernel_h &&
                      static_cast<long>(in.w) + 2 * d.pad >= d.kernel_w,
                  "kernel larger than padded input");
  return Shape{in.n, static_cast<std::size_t>(d.out_channels), static_cast<std::size_t>(oh),
               static_cast<std::size_t>(ow)};
}

/// Grouped 2-D convolution with zero padding. Padded taps are skipped; their
/// products would be exactly zero under every multiplier.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvDesc& d, const Multiplier& mul, SaturationCounter& sat,
                 unsigned threads = 1) {
  const Shape out_shape = conv_output_shape(input.shape(), d);
  detail::require(d.weights.size() == d.weight_count(), "conv weight count mismatch");
  detail::require(d.bias.empty() || d.bias.size() == static_cast<std::size_t>(d.out_channels),
                  "conv bias count mismatch");
  using Acc = typename Accumulation<T>::Acc;
  const std::vector<T> weights = detail::convert_weights<T>(d.weights);
  Tensor<T> out(out_shape);
  const Shape& is = input.shape();
  const int in_per_group = d.in_channels / d.groups;
  const int out_per_group = d.out_channels / d.groups;
  const std::size_t jobs = out_shape.n * out_shape.c;
  std::vector<SaturationCounter> sats(jobs);

  mul.visit([&](const auto& kernel) {
    parallel_for(jobs, threads, [&](std::size_t job) {
      const std::size_t n = job / out_shape.c;
      const int oc = static_cast<int>(job % out_shape.c);
      const int group = oc / out_per_group;
      const Acc bias = d.bias.empty() ? Acc{} : Accumulation<T>::bias(d.bias[oc]);
      for (std::size_t oy = 0; oy < out_shape.h; ++oy) {
        for (std::size_t ox = 0; ox < out_shape.w; ++ox) {
          Acc acc{};
          for (int icg = 0; icg < in_per_group; ++icg) {
            const std::size_t ic = static_cast<std::size_t>(group * in_per_group + icg);
            const T* wrow = &weights[((static_cast<std::size_t>(oc) * in_per_group + icg) * d.kernel_h) * d.kernel_w];
            for (int ky = 0; ky < d.kernel_h; ++ky) {
              const long iy = static_cast<long>(oy) * d.stride - d.pad + ky;
              if (iy < 0 || iy >= static_cast<long>(is.h)) continue;
              for (int kx = 0; kx < d.kernel_w; ++kx) {
                const long ix = static_cast<long>(ox) * d.stride - d.pad + kx;
                if (ix < 0 || ix >= static_cast<long>(is.w)) continue;
                acc += Accumulation<T>::product(kernel, wrow[ky * d.kernel_w + kx],
                                                input.at(n, ic, static_cast<std::size_t>(iy),
                                                         static_cast<std::size_t>(ix)));
              }
            }
          }
          out.at(n, static_cast<std::size_t>(oc), oy, ox) = Accumulation<T>::finish(acc + bias, sats[job]);
        }
      }
    });
  });
  for (const auto& s : sats) sat.merge(s);
  return out;
}

template <typename T>
Tensor<T> fully_connected(const Tensor<T>& input, const FcDesc& d, const Multiplier& mul, SaturationCounter& sat,
                          unsigned threads = 1) {
  const Shape& is = input.shape();
  detail::require(is.item_size() == static_cast<std::size_t>(d.in_features),
                  "flattened input has " + std::to_string(is.item_size()) + " values, fc expects " +
                      std::to_string(d.in_features));
  detail::require(d.weights.size() == static_cast<std::size_t>(d.out_features) * d.in_features,
                  "fc weight count mismatch");
  detail::require(d.bias.empty() || d.bias.size() == static_cast<std::size_t>(d.out_features),
                  "fc bias count mismatch");
  using Acc = typename Accumulation<T>::Acc;
  const std::vector<T> weights = detail::convert_weights<T>(d.weights);
  const Shape out_shape{is.n, static_cast<std::size_t>(d.out_features), 1, 1};
  Tensor<T> out(out_shape);
  const std::size_t jobs = is.n * static_cast<std::size_t>(d.out_features);
  std::vector<SaturationCounter> sats(jobs);
  const auto in = input.data();

  mul.visit([&](const auto& kernel) {
    parallel_for(jobs, threads, [&](std::size_t job) {
      const std::size_t n = job / d.out_features;
      const std::size_t o = job % d.out_features;
      const T* x = &in[n * is.item_size()];
      const T* wrow = &weights[o * d.in_features];
      Acc acc{};
      for (int i = 0; i < d.in_features; ++i) acc += Accumulation<T>::product(kernel, wrow[i], x[i]);
      const Acc bias = d.bias.empty() ? Acc{} : Accumulation<T>::bias(d.bias[o]);
      out.data()[job] = Accumulation<T>::finish(acc + bias, sats[job]);
    });
  });
  for (const auto& s : sats) sat.merge(s);
  return out;
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta in double precision. Never
/// routed through the approximate multiplier.
template <typename T>
Tensor<T> batchnorm_infer(const Tensor<T>& input, const BNDesc& bn, SaturationCounter& sat) {
  const Shape& s = input.shape();
  detail::require(s.c == static_cast<std::size_t>(bn.channels), "batchnorm channel count mismatch");
  detail::require(bn.mean.size() == s.c && bn.variance.size() == s.c && bn.scale.size() == s.c &&
                      bn.shift.size() == s.c,
                  "batchnorm parameter count mismatch");
  Tensor<T> out(s);
  for (std::size_t c = 0; c < s.c; ++c) {
    const double mu = bn.mean[c];
    const double inv_std = 1.0 / std::sqrt(static_cast<double>(bn.variance[c]) + bn.epsilon);
    const double gamma = bn.scale[c];
    const double beta = bn.shift[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      for (std::size_t h = 0; h < s.h; ++h) {
        for (std::size_t w = 0; w < s.w; ++w) {
          const double y = gamma * ((real_value(input.at(n, c, h, w)) - mu) * inv_std) + beta;
          if constexpr (std::is_same_v<T, QNum>) {
            out.at(n, c, h, w) = narrow_real(y, sat);
          } else {
            out.at(n, c, h, w) = static_cast<float>(y);
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out = input;
  for (T& v : out.data()) {
    if (v < T{}) v = T{};
  }
  return out;
}

inline Shape pool_output_shape(const Shape& in, const PoolDesc& p) {
  if (p.global) return Shape{in.n, in.c, 1, 1};
  detail::require(p.kernel > 0 && p.stride > 0, "invalid pooling geometry");
  detail::require(in.h >= static_cast<std::size_t>(p.kernel) && in.w >= static_cast<std::size_t>(p.kernel),
                  "pooling window larger than input");
  return Shape{in.n, in.c, (in.h - p.kernel) / p.stride + 1, (in.w - p.kernel) / p.stride + 1};
}

template <typename T>
Tensor<T> maxpool(const Tensor<T>& input, const PoolDesc& p) {
  const Shape os = pool_output_shape(input.shape(), p);
  const std::size_t kh = p.global ? input.shape().h : p.kernel;
  const std::size_t kw = p.global ? input.shape().w : p.kernel;
  const std::size_t stride = p.global ? 1 : p.stride;
  Tensor<T> out(os);
  for (std::size_t n = 0; n < os.n; ++n)
    for (std::size_t c = 0; c < os.c; ++c)
      for (std::size_t oy = 0; oy < os.h; ++oy)
        for (std::size_t ox = 0; ox < os.w; ++ox) {
          T best = input.at(n, c, oy * stride, ox * stride);
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) best = std::max(best, input.at(n, c, oy * stride + ky, ox * stride + kx));
          out.at(n, c, oy, ox) = best;
        }
  return out;
}

namespace detail {

/// floor(sum / count) on raw integers.
inline std::int64_t floor_div(std::int64_t num, std::int64_t den) {
  std::int64_t q = num / den;
  if ((num % den != 0) && ((num < 0) != (den < 0))) --q;
  return q;
}

}  // namespace detail

template <typename T>
Tensor<T> avgpool(const Tensor<T>& input, const PoolDesc& p) {
  const Shape os = pool_output_shape(input.shape(), p);
  const std::size_t kh = p.global ? input.shape().h : p.kernel;
  const std::size_t kw = p.global ? input.shape().w : p.kernel;
  const std::size_t stride = p.global ? 1 : p.stride;
  const auto count = static_cast<std::int64_t>(kh * kw);
  Tensor<T> out(os);
  for (std::size_t n = 0; n < os.n; ++n)
    for (std::size_t c = 0; c < os.c; ++c)
      for (std::size_t oy = 0; oy < os.h; ++oy)
        for (std::size_t ox = 0; ox < os.w; ++ox) {
          if constexpr (std::is_same_v<T, QNum>) {
            std::int64_t sum = 0;
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) sum += input.at(n, c, oy * stride + ky, ox * stride + kx).raw;
            out.at(n, c, oy, ox) = QNum{static_cast<std::int32_t>(detail::floor_div(sum, count))};
          } else {
            float sum = 0.0f;
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) sum += input.at(n, c, oy * stride + ky, ox * stride + kx);
            out.at(n, c, oy, ox) = sum / static_cast<float>(count);
          }
        }
  return out;
}

/// Elementwise sum of two branches; exact in the fixed-point pipeline.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, SaturationCounter& sat) {
  detail::require(a.shape() == b.shape(),
                  "add operands differ in shape: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if constexpr (std::is_same_v<T, QNum>) {
      out.data()[i] = narrow(acc_add(QAcc::from_qnum(a.data()[i]), QAcc::from_qnum(b.data()[i])), sat);
    } else {
      out.data()[i] = a.data()[i] + b.data()[i];
    }
  }
  return out;
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& input) {
  const Shape& s = input.shape();
  return input.reshaped(Shape{s.n, s.item_size(), 1, 1});
}

/// Indices of the k largest scores, ties broken by the lower index.
template <typename V>
std::vector<std::size_t> topk(std::span<const V> scores, std::size_t k) {
  if (k > scores.size()) {
    throw Error(ErrorCode::ShapeMismatch, "top-" + std::to_string(k) + " requested from " +
                                              std::to_string(scores.size()) + " scores");
  }
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[b] < scores[a]; });
  idx.resize(k);
  return idx;
}

template <typename V>
std::vector<std::size_t> topk(const std::vector<V>& scores, std::size_t k) {
  return topk(std::span<const V>(scores), k);
}

}  // namespace approxmac
