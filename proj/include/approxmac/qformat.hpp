// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <string>

#include "approxmac/error.hpp"

// Q16.16 samples and wide Q32.32 accumulators.
//
// QNum  : 32-bit two's complement, value = raw / 2^16, range [-32768, 32768 - 2^-16].
// QAcc  : value = raw / 2^32. The raw word is 128 bits wide; the guard policy
//         allows |raw| < 2^95, i.e. 32 guard bits above a 64-bit Q32.32 word.
//         The exact product of two QNum always fits (|raw| <= 2^62).
//
// Everything here is a pure function on plain values.

namespace approxmac {

__extension__ typedef __int128 int128_t;
__extension__ typedef unsigned __int128 uint128_t;

inline constexpr int kQFracBits = 16;
inline constexpr int kAccFracBits = 32;
inline constexpr int kAccGuardBits = 32;

struct QNum {
  std::int32_t raw = 0;

  static constexpr QNum from_raw(std::int32_t r) { return QNum{r}; }
  static constexpr QNum max() { return QNum{std::numeric_limits<std::int32_t>::max()}; }
  static constexpr QNum min() { return QNum{std::numeric_limits<std::int32_t>::min()}; }

  friend constexpr auto operator<=>(QNum, QNum) = default;
};

struct QAcc {
  int128_t raw = 0;

  static constexpr QAcc from_raw(int128_t r) { return QAcc{r}; }
  /// Lossless widening of a sample into accumulator scale.
  static constexpr QAcc from_qnum(QNum q) {
    return QAcc{static_cast<int128_t>(q.raw) * (int128_t{1} << (kAccFracBits - kQFracBits))};
  }

  friend constexpr bool operator==(QAcc, QAcc) = default;
  friend constexpr auto operator<=>(QAcc a, QAcc b) { return a.raw <=> b.raw; }
};

inline constexpr int128_t kAccLimit = int128_t{1} << (63 + kAccGuardBits);

struct SignMag {
  int sign = 1;  // +1 or -1
  std::uint32_t mag = 0;

  friend constexpr bool operator==(SignMag, SignMag) = default;
};

/// Counts narrowing saturations; one per execution context, merged at join points.
struct SaturationCounter {
  std::uint64_t count = 0;

  void merge(const SaturationCounter& other) { count += other.count; }
};

/// floor(x * 2^16), saturated. Truncation, never rounding.
inline QNum quantize(double x) {
  if (x != x) return QNum{0};
  const double scaled = std::floor(x * 65536.0);
  if (scaled >= 2147483647.0) return QNum::max();
  if (scaled <= -2147483648.0) return QNum::min();
  return QNum{static_cast<std::int32_t>(scaled)};
}

constexpr double to_real(QNum q) { return static_cast<double>(q.raw) / 65536.0; }

/// Rounds to the nearest double once |raw| >= 2^53.
inline double to_real(QAcc a) {
  return std::ldexp(static_cast<long double>(a.raw), -kAccFracBits);
}

inline SignMag split_sign(QNum q) {
  if (q.raw == std::numeric_limits<std::int32_t>::min()) {
    throw Error(ErrorCode::MostNegative, "raw value -2^31 has no 32-bit magnitude; saturate first");
  }
  if (q.raw < 0) return SignMag{-1, static_cast<std::uint32_t>(-q.raw)};
  return SignMag{1, static_cast<std::uint32_t>(q.raw)};
}

constexpr QNum recompose(SignMag sm) {
  const auto m = static_cast<std::int64_t>(sm.mag);
  return QNum{static_cast<std::int32_t>(sm.sign < 0 ? -m : m)};
}

inline bool within_guard(QAcc a) { return a.raw < kAccLimit && a.raw > -kAccLimit; }

inline QAcc acc_add(QAcc a, QAcc b) {
  if (!within_guard(a) || !within_guard(b)) {
    throw Error(ErrorCode::AccOverflow, "accumulator operand exceeds the guard-bit budget");
  }
  const QAcc sum{a.raw + b.raw};
  if (!within_guard(sum)) {
    throw Error(ErrorCode::AccOverflow, "accumulator sum exceeds the guard-bit budget");
  }
  return sum;
}

/// Lowest value narrowing produces. Layer outputs saturate symmetrically so
/// they always have a magnitude for the next layer's multipliers.
inline constexpr std::int32_t kNarrowMin = -std::numeric_limits<std::int32_t>::max();

/// Drops the fractional bits below 2^-16 (floor) and saturates to
/// [-(2^31 - 1), 2^31 - 1] raw, counting every clamp.
inline QNum narrow(QAcc a, SaturationCounter& sat) {
  const int128_t shifted = a.raw >> (kAccFracBits - kQFracBits);  // arithmetic shift == floor
  if (shifted > std::numeric_limits<std::int32_t>::max()) {
    ++sat.count;
    return QNum::max();
  }
  if (shifted < kNarrowMin) {
    ++sat.count;
    return QNum{kNarrowMin};
  }
  return QNum{static_cast<std::int32_t>(shifted)};
}

inline QNum narrow(QAcc a) {
  SaturationCounter ignored;
  return narrow(a, ignored);
}

/// Real value to QNum through the accumulator path: floor + counted saturation.
inline QNum narrow_real(double x, SaturationCounter& sat) {
  if (x != x) {
    throw Error(ErrorCode::Internal, "NaN reached narrowing");
  }
  const double scaled = std::floor(x * 65536.0);
  if (scaled > 2147483647.0) {
    ++sat.count;
    return QNum::max();
  }
  if (scaled < static_cast<double>(kNarrowMin)) {
    ++sat.count;
    return QNum{kNarrowMin};
  }
  return QNum{static_cast<std::int32_t>(scaled)};
}

inline std::string to_string(int128_t v) {
  if (v == 0) return "0";
  const bool neg = v < 0;
  uint128_t u = neg ? static_cast<uint128_t>(-(v + 1)) + 1 : static_cast<uint128_t>(v);
  std::string s;
  while (u != 0) {
    s.insert(s.begin(), static_cast<char>('0' + static_cast<int>(u % 10)));
    u /= 10;
  }
  return neg ? "-" + s : s;
}

}  // namespace approxmac
