// SPDX-License-Identifier: Apache-2.0
// Mean relative error of Mitchell's multiplier and how it settles in dot products.

#include <cstdio>

#include "approxmac/approxmac.hpp"

int main() {
  using namespace approxmac;
  CharacterizeOptions opt;
  opt.samples = 200'000;
  opt.seed = 7;
  const auto s = characterize(MultiplierSpec::mitchell(), opt);
  std::printf("mitchell: mean %.4f%%  min %.4f%%  max %.4f%%\n", 100 * s.mean, 100 * s.min, 100 * s.max);

  for (const auto& p : dot_error_convergence(MultiplierSpec::mitchell(), {1, 16, 256}, 2000, 7)) {
    std::printf("n=%-5zu mean %.4f%%  variance %.3g\n", p.length, 100 * p.mean, p.variance);
  }
}
