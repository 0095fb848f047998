// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <type_traits>
#include <variant>

#include "approxmac/error.hpp"
#include "approxmac/multiplier_spec.hpp"
#include "approxmac/qformat.hpp"

// Bit-exact software models of the studied multipliers.
//
// Fixed-point kinds multiply two Q16.16 samples and return the Q32.32
// accumulator value. Every kind works on unsigned magnitudes and applies the
// XOR of operand signs afterwards, so errors are symmetric between positive
// and negative products. A zero operand always yields exactly zero.

namespace approxmac {

/// Logarithm of a positive magnitude in Mitchell form: M = 2^characteristic * (1 + m).
struct LogRep {
  int characteristic = 0;
  /// m scaled by 2^32, i.e. the bits below the leading one, left aligned.
  std::uint64_t mantissa = 0;

  static constexpr int kFracBits = 32;
};

inline int leading_one(std::uint64_t mag) { return std::bit_width(mag) - 1; }

inline LogRep to_log_rep(std::uint32_t mag) {
  const int k = leading_one(mag);
  const std::uint64_t below = mag - (std::uint64_t{1} << k);
  return LogRep{k, below << (LogRep::kFracBits - k)};
}

namespace detail {

struct Operand {
  bool negative = false;
  std::uint32_t mag = 0;
};

inline Operand operand(QNum q, SignMode mode) {
  if (q.raw < 0 && mode == SignMode::OnesComplement) {
    // C1: inverting the word gives |q| - 1, off by one from true negation.
    return Operand{true, ~static_cast<std::uint32_t>(q.raw)};
  }
  const SignMag sm = split_sign(q);
  return Operand{sm.sign < 0, sm.mag};
}

inline QAcc signed_result(uint128_t mag, bool negative) {
  const auto v = static_cast<int128_t>(mag);
  return QAcc{negative ? -v : v};
}

/// Mitchell antilog of the summed logs; exact integer arithmetic, no rounding.
inline uint128_t mitchell_magnitude(std::uint32_t a, std::uint32_t b) {
  if (a == 0 || b == 0) return 0;
  const LogRep la = to_log_rep(a);
  const LogRep lb = to_log_rep(b);
  const std::uint64_t frac = la.mantissa + lb.mantissa;  // < 2^33
  const int k = la.characteristic + lb.characteristic;
  constexpr std::uint64_t one = std::uint64_t{1} << LogRep::kFracBits;
  if (frac < one) {
    return (static_cast<uint128_t>(one + frac) << k) >> LogRep::kFracBits;
  }
  // Carry into the characteristic: 2^(k+1) * (m_a + m_b).
  return (static_cast<uint128_t>(frac) << (k + 1)) >> LogRep::kFracBits;
}

/// Keeps the leading one and the next `kept - 1` bits.
inline std::uint32_t truncate_below_leading(std::uint32_t mag, int kept) {
  if (mag == 0) return 0;
  const int drop = leading_one(mag) - (kept - 1);
  if (drop <= 0) return mag;
  return mag & ~((std::uint32_t{1} << drop) - 1);
}

/// 2^(ka+kb) + xa*2^kb + xb*2^ka: the shift-and-add block of the iterative
/// log multiplier. Its error is exactly the residue product xa*xb.
inline uint128_t shift_add_block(std::uint64_t a, std::uint64_t b, std::uint64_t& xa, std::uint64_t& xb,
                                 int& ka, int& kb) {
  ka = leading_one(a);
  kb = leading_one(b);
  xa = a - (std::uint64_t{1} << ka);
  xb = b - (std::uint64_t{1} << kb);
  return (uint128_t{1} << (ka + kb)) + (static_cast<uint128_t>(xa) << kb) + (static_cast<uint128_t>(xb) << ka);
}

}  // namespace detail

// Operand truncation width of the iterative multiplier: leading one + 7 bits.
inline constexpr int kIterLogWidth = 8;

inline QAcc mul_exact(QNum a, QNum b) {
  return QAcc{static_cast<int128_t>(static_cast<std::int64_t>(a.raw) * static_cast<std::int64_t>(b.raw))};
}

inline QAcc mul_mitchell(QNum a, QNum b, SignMode sign = SignMode::ExactSign) {
  if (a.raw == 0 || b.raw == 0) return QAcc{0};
  const auto oa = detail::operand(a, sign);
  const auto ob = detail::operand(b, sign);
  return detail::signed_result(detail::mitchell_magnitude(oa.mag, ob.mag), oa.negative != ob.negative);
}

inline QAcc mul_mitchw(QNum a, QNum b, const MultiplierSpec& spec) {
  if (a.raw == 0 || b.raw == 0) return QAcc{0};
  const auto oa = detail::operand(a, spec.sign_mode);
  const auto ob = detail::operand(b, spec.sign_mode);
  const auto ta = detail::truncate_below_leading(oa.mag, spec.w);
  const auto tb = detail::truncate_below_leading(ob.mag, spec.w);
  return detail::signed_result(detail::mitchell_magnitude(ta, tb), oa.negative != ob.negative);
}

namespace detail {

/// Top k bits from the leading one; the kept LSB is forced to one when the
/// dropped bits are nonzero. Magnitudes with at most k significant bits pass
/// through unchanged.
inline std::uint64_t drum_reduce(std::uint32_t mag, int k) {
  if (mag == 0) return 0;
  const int shift = leading_one(mag) - (k - 1);
  if (shift <= 0) return mag;
  if ((mag & ((std::uint32_t{1} << shift) - 1)) == 0) return mag;
  return (static_cast<std::uint64_t>((mag >> shift) | 1u)) << shift;
}

}  // namespace detail

inline QAcc mul_drum(QNum a, QNum b, const MultiplierSpec& spec) {
  if (a.raw == 0 || b.raw == 0) return QAcc{0};
  const SignMag sa = split_sign(a);
  const SignMag sb = split_sign(b);
  const uint128_t mag =
      static_cast<uint128_t>(detail::drum_reduce(sa.mag, spec.k)) * detail::drum_reduce(sb.mag, spec.k);
  return detail::signed_result(mag, sa.sign != sb.sign);
}

namespace detail {

/// Truncate to kIterLogWidth bits; when nonzero bits were dropped, set the
/// highest dropped position so the truncation is unbiased on average.
inline std::uint32_t iterlog_operand(std::uint32_t mag) {
  const int drop = leading_one(mag) - (kIterLogWidth - 1);
  if (drop <= 0) return mag;
  const std::uint32_t kept = mag & ~((std::uint32_t{1} << drop) - 1);
  if (kept == mag) return mag;
  return kept | (std::uint32_t{1} << (drop - 1));
}

inline uint128_t iterlog_magnitude(std::uint32_t a_in, std::uint32_t b_in) {
  if (a_in == 0 || b_in == 0) return 0;
  const std::uint32_t a = iterlog_operand(a_in);
  const std::uint32_t b = iterlog_operand(b_in);
  std::uint64_t xa, xb;
  int ka, kb;
  uint128_t product = shift_add_block(a, b, xa, xb, ka, kb);
  if (xa == 0 || xb == 0) return product;  // first pass already exact

  // One correction pass on the residues.
  std::uint64_t ra, rb;
  int ja, jb;
  product += shift_add_block(xa, xb, ra, rb, ja, jb);
  if (ra != 0 && rb != 0) {
    // Expected value of the remaining residue product ra*rb.
    product += uint128_t{1} << (ja + jb - 2);
  }
  return product;
}

}  // namespace detail

inline QAcc mul_iterlog(QNum a, QNum b, SignMode sign = SignMode::ExactSign) {
  if (a.raw == 0 || b.raw == 0) return QAcc{0};
  const auto oa = detail::operand(a, sign);
  const auto ob = detail::operand(b, sign);
  return detail::signed_result(detail::iterlog_magnitude(oa.mag, ob.mag), oa.negative != ob.negative);
}

// bfloat16 -------------------------------------------------------------------

/// Drops the low 16 significand bits of a binary32 value (truncation, no rounding).
inline float bf16_truncate(float x) {
  std::uint32_t bits;
  std::memcpy(&bits, &x, sizeof bits);
  bits &= 0xFFFF0000u;
  float out;
  std::memcpy(&out, &bits, sizeof out);
  return out;
}

/// Both operands truncated to bfloat16 and multiplied; the 8x8-bit significand
/// product is exact in binary32, so the result keeps binary32 width.
inline float mul_bf16(float a, float b) { return bf16_truncate(a) * bf16_truncate(b); }

/// The same truncation applied to a Q16.16 sample: keep the leading one plus
/// 7 bits, exactly what bfloat16 keeps of the real value.
inline QAcc mul_bf16_fixed(QNum a, QNum b) {
  if (a.raw == 0 || b.raw == 0) return QAcc{0};
  const SignMag sa = split_sign(a);
  const SignMag sb = split_sign(b);
  const uint128_t mag = static_cast<uint128_t>(detail::truncate_below_leading(sa.mag, 8)) *
                        detail::truncate_below_leading(sb.mag, 8);
  return detail::signed_result(mag, sa.sign != sb.sign);
}

inline QAcc mul_constant_error(QNum a, QNum b, const MultiplierSpec& spec) {
  return QAcc{(mul_exact(a, b).raw * spec.const_num) >> spec.const_shift};
}

// Dispatch -------------------------------------------------------------------

namespace kernels {

struct Exact {
  static constexpr bool kRealPipeline = true;
  QAcc operator()(QNum a, QNum b) const { return mul_exact(a, b); }
  float operator()(float a, float b) const { return a * b; }
};

struct Mitchell {
  static constexpr bool kRealPipeline = false;
  SignMode sign;
  QAcc operator()(QNum a, QNum b) const { return mul_mitchell(a, b, sign); }
};

struct MitchW {
  static constexpr bool kRealPipeline = false;
  MultiplierSpec spec;
  QAcc operator()(QNum a, QNum b) const { return mul_mitchw(a, b, spec); }
};

struct Drum {
  static constexpr bool kRealPipeline = false;
  MultiplierSpec spec;
  QAcc operator()(QNum a, QNum b) const { return mul_drum(a, b, spec); }
};

struct IterLog {
  static constexpr bool kRealPipeline = false;
  SignMode sign;
  QAcc operator()(QNum a, QNum b) const { return mul_iterlog(a, b, sign); }
};

struct Bf16 {
  static constexpr bool kRealPipeline = true;
  QAcc operator()(QNum a, QNum b) const { return mul_bf16_fixed(a, b); }
  float operator()(float a, float b) const { return mul_bf16(a, b); }
};

struct ConstantError {
  static constexpr bool kRealPipeline = false;
  MultiplierSpec spec;
  QAcc operator()(QNum a, QNum b) const { return mul_constant_error(a, b, spec); }
};

using Any = std::variant<Exact, Mitchell, MitchW, Drum, IterLog, Bf16, ConstantError>;

}  // namespace kernels

/// Callable conforming to the shared multiply contract. Cheap to copy and
/// safe to share between threads.
class Multiplier {
 public:
  explicit Multiplier(const MultiplierSpec& spec) : spec_(spec), kernel_(select(spec)) {}

  const MultiplierSpec& spec() const { return spec_; }

  QAcc operator()(QNum a, QNum b) const {
    return std::visit([&](const auto& k) { return k(a, b); }, kernel_);
  }

  float operator()(float a, float b) const {
    return std::visit(
        [&](const auto& k) -> float {
          if constexpr (std::decay_t<decltype(k)>::kRealPipeline) {
            return k(a, b);
          } else {
            throw Error(ErrorCode::InvalidSpec, to_string(spec_) + " requires the fixed-point pipeline");
          }
        },
        kernel_);
  }

  /// Calls f with the concrete kernel so hot loops are instantiated per kind.
  template <class F>
  decltype(auto) visit(F&& f) const {
    return std::visit(std::forward<F>(f), kernel_);
  }

 private:
  static kernels::Any select(const MultiplierSpec& spec) {
    validate(spec);
    switch (spec.kind) {
      case MulKind::Exact: return kernels::Exact{};
      case MulKind::Mitchell: return kernels::Mitchell{spec.sign_mode};
      case MulKind::MitchW: return kernels::MitchW{spec};
      case MulKind::Drum: return kernels::Drum{spec};
      case MulKind::IterLogTrunc: return kernels::IterLog{spec.sign_mode};
      case MulKind::Bfloat16: return kernels::Bf16{};
      case MulKind::ConstantError: return kernels::ConstantError{spec};
    }
    throw Error(ErrorCode::InvalidSpec, "unknown multiplier kind");
  }

  MultiplierSpec spec_;
  kernels::Any kernel_;
};

inline Multiplier make_multiplier(const MultiplierSpec& spec) { return Multiplier(spec); }

}  // namespace approxmac
