// SPDX-License-Identifier: Apache-2.0
// Loads a model and an IDX dataset, then prints top-1 accuracy per multiplier.
//
//   sample_run_lenet fixtures/lenet/lenet.json fixtures/mnist/t1k-images.idx3 fixtures/mnist/t1k-labels.idx1

#include <cstdio>

#include "approxmac/approxmac.hpp"
#include "approxmac/cli.hpp"

int main(int argc, char** argv) {
  using namespace approxmac;
  if (argc != 4) {
    std::fprintf(stderr, "usage: %s <manifest> <images> <labels>\n", argv[0]);
    return 1;
  }
  const ModelGraph model = load_model(argv[1]);
  const auto data = load_mnist_idx(argv[2], argv[3], 200);
  for (const char* text : {"exact", "mitchw:w=6:sign=c1", "drum:k=6", "bf16"}) {
    const auto r = run_inference(model, parse_multiplier_spec(text), data, 1);
    std::printf("%-20s top-1 %zu/%zu\n", text, r.top1, r.samples);
  }
}
