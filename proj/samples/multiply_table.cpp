// SPDX-License-Identifier: Apache-2.0
// Prints a few products under every multiplier next to the exact result.

#include <cstdio>

#include "approxmac/approxmac.hpp"

int main() {
  using namespace approxmac;
  const MultiplierSpec specs[] = {MultiplierSpec::exact(),  MultiplierSpec::mitchell(),
                                  MultiplierSpec::mitchw(6, SignMode::OnesComplement),
                                  MultiplierSpec::drum(6),  MultiplierSpec::iterlog(),
                                  MultiplierSpec::bf16()};
  const double pairs[][2] = {{3.0, 5.0}, {5.0, 5.0}, {1.5, -2.75}, {0.1, 123.456}};
  for (const auto& spec : specs) {
    const Multiplier mul(spec);
    std::printf("%-22s", to_string(spec).c_str());
    for (const auto& p : pairs) std::printf("  %12.6f", to_real(mul(quantize(p[0]), quantize(p[1]))));
    std::printf("\n");
  }
}
