// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "approxmac/cli.hpp"

namespace {

void add_common(CLI::App* app, approxmac::RunConfig& c) {
  app->add_option("--mul", c.mul, "multiplier spec, e.g. exact, mitchell, mitchw:w=6:sign=c1, drum:k=6, iterlog, bf16");
  app->add_option("--seed", c.seed, "PRNG seed (mt19937_64)");
  app->add_option("--out", c.out, "output directory (APPROXMAC_OUT overrides)");
  app->add_option("--threads", c.threads, "worker threads; never changes results");
}

void add_model_data(CLI::App* app, approxmac::RunConfig& c, std::string& data, std::vector<std::string>& node_muls) {
  app->add_option("--model", c.model, "model manifest (JSON)")->required();
  app->add_option("--data", data, "IDX images and labels: <images>,<labels>")->required();
  app->add_option("--limit", c.limit, "use at most n samples");
  app->add_option("--adjust-bn", c.adjust_bn, "fold mean error e into BN statistics before running");
  app->add_option("--node-mul", node_muls, "per-node override <node>=<spec>; repeatable");
}

}  // namespace

int main(int argc, char** argv) {
  approxmac::RunConfig c;
  std::string data;
  std::vector<std::string> node_muls;

  CLI::App app{"Approximate-multiplier CNN inference and error analysis"};
  app.set_version_flag("--version", std::string(approxmac::kToolVersion));
  app.require_subcommand(1);

  auto* ch = app.add_subcommand("characterize", "error statistics of a multiplier over random operand pairs");
  add_common(ch, c);
  ch->add_option("--limit", c.limit, "number of operand pairs (default 1000000)");
  ch->add_option("--range", c.range, "operand distribution: uniform, positive, layer");
  ch->add_flag("--dump", c.dump, "also write every (a, b, rel_err) triplet");

  auto* inf = app.add_subcommand("infer", "classify a dataset and report top-1/top-5 accuracy");
  add_common(inf, c);
  add_model_data(inf, c, data, node_muls);

  auto* cmp = app.add_subcommand("compare", "per-layer deviation and channel variance, exact vs approximate");
  add_common(cmp, c);
  add_model_data(cmp, c, data, node_muls);
  cmp->add_option("--profile-point", c.profile_point, "layer_output (conv/fc outputs) or activation (relu outputs)");

  auto* adj = app.add_subcommand("adjust-bn", "rewrite BN statistics for a multiplier mean error");
  add_common(adj, c);
  adj->add_option("--model", c.model, "model manifest (JSON)")->required();
  adj->add_option("--adjust-bn", c.adjust_bn, "mean error e, e > -1")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return approxmac::kExitUsage;
  }

  c.command = app.get_subcommands().front()->get_name();
  if (!data.empty()) {
    const auto comma = data.find(',');
    if (comma == std::string::npos) {
      std::cerr << "approxmac: --data expects <images>,<labels>\n";
      return approxmac::kExitUsage;
    }
    c.images = data.substr(0, comma);
    c.labels = data.substr(comma + 1);
  }
  for (const auto& nm : node_muls) {
    const auto eq = nm.find('=');
    if (eq == std::string::npos || eq == 0) {
      std::cerr << "approxmac: --node-mul expects <node>=<spec>\n";
      return approxmac::kExitUsage;
    }
    c.node_muls.emplace_back(nm.substr(0, eq), nm.substr(eq + 1));
  }
  return approxmac::run(c);
}
