// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "approxmac/qformat.hpp"
#include "approxmac/rng.hpp"

using namespace approxmac;

TEST(Quantize, Examples) {
  EXPECT_EQ(quantize(0.0).raw, 0);
  EXPECT_EQ(quantize(1.0).raw, 65536);
  EXPECT_EQ(quantize(40000.0).raw, 0x7FFFFFFF);
  EXPECT_EQ(quantize(-40000.0).raw, std::numeric_limits<std::int32_t>::min());
}

TEST(Quantize, TruncatesTowardNegativeInfinity) {
  EXPECT_EQ(quantize(1.0 + 0x1.0p-17).raw, 65536);
  EXPECT_EQ(quantize(-0x1.0p-17).raw, -1);
  EXPECT_EQ(quantize(-1.0 - 0x1.0p-17).raw, -65537);
  EXPECT_EQ(quantize(0.1).raw, 6553);  // 0.1 * 65536 = 6553.6
}

TEST(ToReal, Examples) {
  EXPECT_EQ(to_real(QNum{65536}), 1.0);
  EXPECT_EQ(to_real(QNum{1}), 0x1.0p-16);
  EXPECT_EQ(to_real(QNum{-32768}), -0.5);
}

TEST(Quantize, RoundTripEveryBoundaryAndRandomValue) {
  for (std::int32_t r : {std::numeric_limits<std::int32_t>::min(), -1, 0, 1, std::numeric_limits<std::int32_t>::max()}) {
    EXPECT_EQ(quantize(to_real(QNum{r})).raw, r);
  }
  Rng rng(11);
  for (int i = 0; i < 200000; ++i) {
    const QNum q{static_cast<std::int32_t>(rng.uniform_int(INT32_MIN, INT32_MAX))};
    ASSERT_EQ(quantize(to_real(q)), q);
  }
}

TEST(SplitSign, Examples) {
  EXPECT_EQ(split_sign(QNum{65536}), (SignMag{1, 65536}));
  EXPECT_EQ(split_sign(QNum{-65536}), (SignMag{-1, 65536}));
  try {
    split_sign(QNum::min());
    FAIL() << "expected MostNegative";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MostNegative);
  }
}

TEST(SplitSign, RecomposeIsIdentity) {
  Rng rng(12);
  for (int i = 0; i < 100000; ++i) {
    const QNum q{static_cast<std::int32_t>(rng.uniform_int(INT32_MIN + 1, INT32_MAX))};
    ASSERT_EQ(recompose(split_sign(q)), q);
  }
  EXPECT_EQ(recompose(split_sign(QNum::max())), QNum::max());
}

TEST(AccAdd, Examples) {
  EXPECT_EQ(acc_add(QAcc{5}, QAcc{7}).raw, 12);
  const QAcc x{123456789};
  EXPECT_EQ(acc_add(x, QAcc{0}), x);
  QAcc s;
  for (int i = 0; i < 1024; ++i) s = acc_add(s, QAcc{int128_t{1} << 32});
  EXPECT_TRUE(s.raw == (int128_t{1} << 42));
}

TEST(AccAdd, GuardBudgetHoldsWorstCaseFanIn) {
  // 2^15 products of the most negative sample with itself.
  const QAcc worst{int128_t{1} << 62};
  QAcc s;
  for (int i = 0; i < (1 << 15); ++i) s = acc_add(s, worst);
  EXPECT_TRUE(s.raw == (int128_t{1} << 77));
  EXPECT_TRUE(within_guard(s));
}

TEST(AccAdd, OverflowIsReported) {
  const QAcc big{kAccLimit - 1};
  try {
    acc_add(big, QAcc{1});
    FAIL() << "expected AccOverflow";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::AccOverflow);
  }
}

TEST(AccAdd, PermutationInvariant) {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<QAcc> terms(257);
    for (auto& t : terms) {
      const auto a = static_cast<std::int64_t>(rng.uniform_int(INT32_MIN + 1, INT32_MAX));
      const auto b = static_cast<std::int64_t>(rng.uniform_int(INT32_MIN + 1, INT32_MAX));
      t = QAcc{static_cast<int128_t>(a) * b};
    }
    QAcc ref;
    for (const auto& t : terms) ref = acc_add(ref, t);
    for (int p = 0; p < 5; ++p) {
      for (std::size_t i = terms.size() - 1; i > 0; --i) {
        std::swap(terms[i], terms[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
      }
      QAcc s;
      for (const auto& t : terms) s = acc_add(s, t);
      ASSERT_EQ(s, ref);
    }
  }
}

TEST(Narrow, Examples) {
  SaturationCounter sat;
  EXPECT_EQ(narrow(QAcc{int128_t{1} << 32}, sat).raw, 65536);
  const int128_t one_and_half = (int128_t{3} << 31);
  EXPECT_EQ(narrow(QAcc{one_and_half + (int128_t{1} << 12)}, sat).raw, 98304);
  EXPECT_EQ(sat.count, 0u);
  EXPECT_EQ(narrow(QAcc{int128_t{1000000} << 32}, sat), QNum::max());
  EXPECT_EQ(sat.count, 1u);
}

TEST(Narrow, FloorsNegativeValuesAndSaturatesSymmetrically) {
  SaturationCounter sat;
  EXPECT_EQ(narrow(QAcc{-1}, sat).raw, -1);
  EXPECT_EQ(narrow(QAcc{-(int128_t{1000000} << 32)}, sat).raw, kNarrowMin);
  EXPECT_EQ(sat.count, 1u);
  EXPECT_NO_THROW(split_sign(narrow(QAcc{-(int128_t{1} << 94)})));
}

TEST(Narrow, ExactProductsAreLossless) {
  Rng rng(14);
  for (int i = 0; i < 100000; ++i) {
    const auto a = static_cast<std::int32_t>(rng.uniform_int(-(1 << 20), 1 << 20));
    const auto b = static_cast<std::int32_t>(rng.uniform_int(-(1 << 20), 1 << 20));
    const QAcc p{static_cast<int128_t>(static_cast<std::int64_t>(a) * b)};
    ASSERT_EQ(to_real(p), to_real(QNum{a}) * to_real(QNum{b}));
  }
}

TEST(NarrowReal, MatchesAccumulatorNarrowing) {
  Rng rng(15);
  SaturationCounter s1, s2;
  for (int i = 0; i < 100000; ++i) {
    const std::int64_t raw = static_cast<std::int64_t>(rng.next_u64() >> 20) - (std::int64_t{1} << 43);
    const QAcc a{raw};
    ASSERT_EQ(narrow(a, s1), narrow_real(to_real(a), s2));
  }
}

TEST(Int128, ToString) {
  EXPECT_EQ(to_string(int128_t{0}), "0");
  EXPECT_EQ(to_string(int128_t{-42}), "-42");
  EXPECT_EQ(to_string(int128_t{1} << 100), "1267650600228229401496703205376");
}
