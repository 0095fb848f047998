// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "approxmac/errstat.hpp"
#include "approxmac/graph.hpp"
#include "approxmac/modelio.hpp"
#include "approxmac/multiplier_spec.hpp"

// Experiment driver behind the approxmac executable. Argument parsing lives
// in tools/approxmac.cpp; everything here works on a filled RunConfig.
//
// Every JSON artifact carries the tool version, a config echo, the seed and
// the multiplier string. Wall-clock time, the output directory and the worker
// count go to run_meta.json only, so artifacts are byte-identical across
// reruns and thread counts.

namespace approxmac {

inline constexpr const char* kToolName = "approxmac";
inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitInternal = 3 };

inline int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidSpec: return kExitUsage;
    case ErrorCode::ParseError:
    case ErrorCode::ShapeMismatch:
    case ErrorCode::NonFiniteWeight:
    case ErrorCode::BadMagic:
    case ErrorCode::CountMismatch:
    case ErrorCode::IoError: return kExitData;
    default: return kExitInternal;
  }
}

/// Raised for missing or inconsistent arguments.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string command;
  std::string mul = "exact";
  std::vector<std::pair<std::string, std::string>> node_muls;  // node name, spec text
  std::string model;
  std::string images, labels;
  std::optional<std::size_t> limit;
  std::uint64_t seed = 1;
  std::string out = "approxmac_out";
  std::optional<double> adjust_bn;
  unsigned threads = 1;
  std::string range = "uniform";
  bool dump = false;
  std::string profile_point = "layer_output";
};

/// Applies APPROXMAC_OUT, which takes precedence over --out.
inline void apply_environment(RunConfig& cfg) {
  if (const char* env = std::getenv("APPROXMAC_OUT"); env && *env) cfg.out = env;
}

namespace cli_detail {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline json config_echo(const RunConfig& c) {
  json j{{"command", c.command}, {"mul", c.mul}, {"seed", c.seed}};
  if (!c.model.empty()) j["model"] = c.model;
  if (!c.images.empty()) j["data"] = {c.images, c.labels};
  if (c.limit) j["limit"] = *c.limit;
  if (c.adjust_bn) j["adjust_bn"] = *c.adjust_bn;
  if (!c.node_muls.empty()) {
    json nm = json::object();
    for (const auto& [node, spec] : c.node_muls) nm[node] = spec;
    j["node_mul"] = nm;
  }
  if (c.command == "characterize") {
    j["range"] = c.range;
    j["dump"] = c.dump;
  }
  if (c.command == "compare") j["profile_point"] = c.profile_point;
  return j;
}

inline json artifact_header(const RunConfig& c) {
  return {{"tool", {{"name", kToolName}, {"version", kToolVersion}}},
          {"config", config_echo(c)},
          {"seed", c.seed},
          {"multiplier", c.mul}};
}

inline fs::path out_dir(const RunConfig& c) {
  const fs::path dir(c.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create output directory '" + c.out + "': " + ec.message());
  return dir;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::IoError, "cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw Error(ErrorCode::IoError, "short write to '" + path.string() + "'");
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline void write_meta(const fs::path& dir, const RunConfig& c) {
  const json meta{{"command", c.command}, {"timestamp", utc_timestamp()}, {"threads", c.threads}, {"out", c.out}};
  write_text(dir / "run_meta.json", meta.dump(2) + "\n");
}

/// Error wrapper that records which stage of a command failed.
template <class Fn>
auto stage(const char* name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    throw e.with_context(name);
  }
}

inline MultiplierSpec parse_spec(const std::string& text) { return parse_multiplier_spec(text); }

/// Loaded model with --node-mul overrides applied; --adjust-bn is applied
/// only when `adjust` is set.
inline ModelGraph prepare_model(const RunConfig& c, bool adjust = true) {
  if (c.model.empty()) throw UsageError("--model is required");
  ModelGraph g = stage("loading model", [&] { return load_model(c.model); });
  for (const auto& [node, spec] : c.node_muls) {
    auto it = std::find_if(g.nodes.begin(), g.nodes.end(), [&](const Node& n) { return n.name == node; });
    if (it == g.nodes.end()) throw UsageError("--node-mul names unknown node '" + node + "'");
    if (!it->multiplies()) throw UsageError("--node-mul target '" + node + "' has no multiplications");
    it->multiplier = parse_spec(spec);
  }
  if (adjust && c.adjust_bn) g = adjust_bn(g, *c.adjust_bn);
  return g;
}

inline std::vector<LabeledImage> prepare_data(const RunConfig& c) {
  if (c.images.empty() || c.labels.empty()) throw UsageError("--data images,labels is required");
  if (c.limit && *c.limit == 0) throw UsageError("--limit must be at least 1");
  auto data = stage("loading data", [&] {
    return load_mnist_idx(c.images, c.labels, c.limit.value_or(std::numeric_limits<std::size_t>::max()));
  });
  if (data.empty()) throw Error(ErrorCode::CountMismatch, "loading data: dataset is empty");
  return data;
}

}  // namespace cli_detail

inline int cmd_characterize(const RunConfig& c, std::ostream& log = std::cerr) {
  using cli_detail::json;
  const MultiplierSpec spec = cli_detail::parse_spec(c.mul);
  if (c.limit && *c.limit == 0) throw UsageError("--limit must be at least 1");
  CharacterizeOptions opt;
  opt.samples = c.limit.value_or(1'000'000);
  opt.seed = c.seed;
  opt.range = range_policy_from_string(c.range);
  opt.keep_samples = c.dump;
  opt.threads = c.threads;
  log << "characterizing " << to_string(spec) << " over " << opt.samples << " pairs\n";
  const ErrorSummary s = cli_detail::stage("characterize", [&] { return characterize(spec, opt); });

  const auto dir = cli_detail::out_dir(c);
  json doc = cli_detail::artifact_header(c);
  doc["summary"] = to_json(s);
  cli_detail::write_text(dir / "characterize.json", doc.dump(2) + "\n");
  cli_detail::write_text(dir / "characterize_histogram.csv", histogram_csv(s.histogram));
  if (c.dump) cli_detail::write_text(dir / "characterize_dump.csv", dump_csv(s.dump));
  cli_detail::write_meta(dir, c);
  log << "mean " << format_double(s.mean) << " variance " << format_double(s.variance) << " min "
      << format_double(s.min) << " max " << format_double(s.max) << '\n';
  return kExitOk;
}

struct InferReport {
  std::size_t samples = 0;
  std::size_t top1 = 0, top5 = 0;
  std::vector<std::size_t> class_total, class_correct;
  std::vector<int> predictions;
  std::map<std::string, std::uint64_t> saturations;
};

/// Classifies every sample; logits are the first graph output.
inline InferReport run_inference(const ModelGraph& g, const MultiplierSpec& spec, const std::vector<LabeledImage>& data,
                                 unsigned threads) {
  const Pipeline pipeline = pipeline_for(spec);
  const std::string& logits = g.outputs.at(0);
  std::vector<std::vector<std::size_t>> ranked(data.size());
  std::vector<std::map<std::string, std::uint64_t>> sats(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    const auto edges = forward_real_values(g, data[i].image, spec, pipeline, {}, &sats[i]);
    const auto& scores = edges.at(logits).values();
    ranked[i] = topk(scores, std::min<std::size_t>(5, scores.size()));
  });
  InferReport r;
  r.samples = data.size();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto label = static_cast<std::size_t>(data[i].label);
    if (label >= r.class_total.size()) {
      r.class_total.resize(label + 1, 0);
      r.class_correct.resize(label + 1, 0);
    }
    ++r.class_total[label];
    const bool hit1 = ranked[i].front() == label;
    r.top1 += hit1;
    r.class_correct[label] += hit1;
    r.top5 += std::find(ranked[i].begin(), ranked[i].end(), label) != ranked[i].end();
    r.predictions.push_back(static_cast<int>(ranked[i].front()));
    for (const auto& [k, v] : sats[i]) r.saturations[k] += v;
  }
  return r;
}

inline int cmd_infer(const RunConfig& c, std::ostream& out = std::cout, std::ostream& log = std::cerr) {
  using cli_detail::json;
  const MultiplierSpec spec = cli_detail::parse_spec(c.mul);
  const ModelGraph g = cli_detail::prepare_model(c);
  const auto data = cli_detail::prepare_data(c);
  log << "inferring " << data.size() << " samples with " << to_string(spec) << '\n';
  const InferReport r = cli_detail::stage("inference", [&] { return run_inference(g, spec, data, c.threads); });

  const auto dir = cli_detail::out_dir(c);
  json doc = cli_detail::artifact_header(c);
  json classes = json::array();
  for (std::size_t k = 0; k < r.class_total.size(); ++k) {
    classes.push_back({{"class", k}, {"total", r.class_total[k]}, {"correct", r.class_correct[k]}});
  }
  const double n = static_cast<double>(r.samples);
  doc["pipeline"] = pipeline_for(spec) == Pipeline::Real ? "binary32" : "q16.16";
  doc["samples"] = r.samples;
  doc["top1_correct"] = r.top1;
  doc["top5_correct"] = r.top5;
  doc["top1_accuracy"] = static_cast<double>(r.top1) / n;
  doc["top5_accuracy"] = static_cast<double>(r.top5) / n;
  doc["classes"] = std::move(classes);
  doc["saturations"] = r.saturations;
  doc["predictions"] = r.predictions;
  cli_detail::write_text(dir / "infer.json", doc.dump(2) + "\n");
  cli_detail::write_meta(dir, c);

  out << "model       " << g.name << '\n'
      << "multiplier  " << to_string(spec) << '\n'
      << "samples     " << r.samples << '\n'
      << std::fixed << std::setprecision(2) << "top-1       " << 100.0 * static_cast<double>(r.top1) / n << "%  ("
      << r.top1 << ")\n"
      << "top-5       " << 100.0 * static_cast<double>(r.top5) / n << "%  (" << r.top5 << ")\n"
      << "class  correct/total\n";
  for (std::size_t k = 0; k < r.class_total.size(); ++k) {
    out << std::setw(5) << k << "  " << r.class_correct[k] << '/' << r.class_total[k] << '\n';
  }
  std::uint64_t total_sat = 0;
  for (const auto& [k, v] : r.saturations) total_sat += v;
  out << "saturations " << total_sat << '\n';
  out.unsetf(std::ios::fixed);
  return kExitOk;
}

inline int cmd_compare(const RunConfig& c, std::ostream& log = std::cerr) {
  using cli_detail::json;
  const MultiplierSpec spec = cli_detail::parse_spec(c.mul);
  if (c.profile_point != "layer_output" && c.profile_point != "activation") {
    throw UsageError("--profile-point must be layer_output or activation");
  }
  const ModelGraph g = cli_detail::prepare_model(c);
  const ModelGraph reference = cli_detail::prepare_model(c, false);
  const auto data = cli_detail::prepare_data(c);
  std::vector<Tensor<float>> inputs;
  inputs.reserve(data.size());
  for (const auto& d : data) inputs.push_back(d.image);
  CompareOptions opt;
  opt.point = c.profile_point == "activation" ? ProfilePoint::Activation : ProfilePoint::LayerOutput;
  opt.threads = c.threads;
  log << "comparing exact and " << to_string(spec) << " on " << inputs.size() << " samples\n";
  const Comparison cmp = cli_detail::stage("compare", [&] { return compare_model(reference, g, spec, inputs, opt); });

  const auto dir = cli_detail::out_dir(c);
  json doc = cli_detail::artifact_header(c);
  doc["comparison"] = to_json(cmp);
  cli_detail::write_text(dir / "compare.json", doc.dump(2) + "\n");
  cli_detail::write_text(dir / "profile.csv", profile_csv(cmp.profile));
  cli_detail::write_text(dir / "variance.csv", variance_csv(cmp.variance));
  cli_detail::write_meta(dir, c);
  for (const auto& l : cmp.profile.layers) log << "  " << l.node << ' ' << format_double(l.mean) << '\n';
  return kExitOk;
}

inline int cmd_adjust_bn(const RunConfig& c, std::ostream& out = std::cout, std::ostream& log = std::cerr) {
  if (!c.adjust_bn) throw UsageError("--adjust-bn <e> is required");
  if (c.model.empty()) throw UsageError("--model is required");
  const ModelGraph g = cli_detail::stage("loading model", [&] { return load_model(c.model); });
  const std::size_t bn = count_bn_nodes(g);
  if (bn == 0) log << "warning: model '" << g.name << "' has no batchnorm nodes; nothing to adjust\n";
  const ModelGraph adjusted = cli_detail::stage("adjust", [&] { return adjust_bn(g, *c.adjust_bn); });
  const auto dir = cli_detail::out_dir(c);
  const auto target = dir / std::filesystem::path(c.model).filename();
  if (std::filesystem::exists(target) && std::filesystem::equivalent(target, c.model)) {
    throw UsageError("refusing to overwrite the input manifest; choose another --out");
  }
  cli_detail::stage("saving model", [&] {
    save_model(adjusted, target);
    return 0;
  });
  cli_detail::write_meta(dir, c);
  out << "adjusted " << bn << " batchnorm node(s) with e=" << format_double(*c.adjust_bn) << " -> " << target.string()
      << '\n';
  return kExitOk;
}

/// Dispatches a parsed config and maps failures onto exit codes.
inline int run(RunConfig c, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  apply_environment(c);
  try {
    if (c.threads == 0) throw UsageError("--threads must be at least 1");
    if (c.command == "characterize") return cmd_characterize(c, err);
    if (c.command == "infer") return cmd_infer(c, out, err);
    if (c.command == "compare") return cmd_compare(c, err);
    if (c.command == "adjust-bn") return cmd_adjust_bn(c, out, err);
    throw UsageError("unknown command '" + c.command + "'");
  } catch (const UsageError& e) {
    err << kToolName << ": " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    err << kToolName << ": " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << kToolName << ": internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}

}  // namespace approxmac
