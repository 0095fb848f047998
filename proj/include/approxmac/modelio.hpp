// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "approxmac/error.hpp"
#include "approxmac/graph.hpp"
#include "approxmac/multiplier_spec.hpp"
#include "approxmac/tensor.hpp"

// Model manifests (JSON, version "1"), binary32 weight blobs, MNIST IDX
// ingestion and the batch-norm statistics correction.
//
// Blob layout: little-endian binary32, row major; conv weights (out, in/g, kh, kw),
// fc weights (out, in). The schema is documented in docs/manifest.md.

namespace approxmac {

static_assert(std::endian::native == std::endian::little, "blob I/O assumes a little-endian host");

inline constexpr const char* kManifestVersion = "1";

namespace detail {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline std::vector<char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open '" + path.string() + "'");
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

class BlobReader {
 public:
  explicit BlobReader(fs::path base) : base_(std::move(base)) {}

  std::vector<float> read(const json& ref, std::size_t expected, const std::string& what) {
    const std::string file = ref.at("file").get<std::string>();
    const auto offset = ref.at("offset").get<std::uint64_t>();
    const auto length = ref.at("length").get<std::uint64_t>();
    const auto count = ref.at("count").get<std::uint64_t>();
    if (length != count * sizeof(float)) {
      throw Error(ErrorCode::ShapeMismatch, what + " blob length " + std::to_string(length) + " bytes does not hold " +
                                                std::to_string(count) + " binary32 values");
    }
    if (count != expected) {
      throw Error(ErrorCode::ShapeMismatch,
                  what + " blob holds " + std::to_string(count) + " values, shape needs " + std::to_string(expected));
    }
    const auto& bytes = load(file);
    if (offset > bytes.size() || length > bytes.size() - offset) {
      throw Error(ErrorCode::ShapeMismatch, what + " blob extends past the end of '" + file + "'");
    }
    std::vector<float> out(count);
    if (count) std::memcpy(out.data(), bytes.data() + offset, length);
    for (float v : out) {
      if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteWeight, what + " contains a non-finite value");
    }
    return out;
  }

 private:
  const std::vector<char>& load(const std::string& file) {
    auto it = cache_.find(file);
    if (it == cache_.end()) it = cache_.emplace(file, read_file(base_ / file)).first;
    return it->second;
  }

  fs::path base_;
  std::map<std::string, std::vector<char>> cache_;
};

inline std::vector<float> optional_blob(BlobReader& blobs, const json& node_blobs, const char* key, std::size_t expected,
                                        const std::string& what) {
  if (!node_blobs.contains(key)) return {};
  return blobs.read(node_blobs.at(key), expected, what);
}

inline BnPlacement parse_placement(const std::string& s) {
  if (s == "before_activation") return BnPlacement::BeforeActivation;
  if (s == "after_activation") return BnPlacement::AfterActivation;
  throw Error(ErrorCode::ParseError, "unknown batchnorm placement '" + s + "'");
}

inline std::string placement_string(BnPlacement p) {
  return p == BnPlacement::BeforeActivation ? "before_activation" : "after_activation";
}

inline Node parse_node(const json& j, BlobReader& blobs) {
  Node node;
  node.name = j.at("name").get<std::string>();
  try {
    const auto type = j.at("type").get<std::string>();
    const auto kind = node_kind_from_string(type);
    if (!kind) throw Error(ErrorCode::ParseError, "unknown node type '" + type + "'");
    node.kind = *kind;
    node.inputs = j.at("inputs").get<std::vector<std::string>>();
    node.output = j.value("output", node.name);
    const json params = j.value("params", json::object());
    const json nb = j.value("blobs", json::object());
    if (j.contains("multiplier")) node.multiplier = parse_multiplier_spec(j.at("multiplier").get<std::string>());

    switch (node.kind) {
      case NodeKind::Conv: {
        ConvDesc d;
        d.out_channels = params.at("out_channels").get<int>();
        d.in_channels = params.at("in_channels").get<int>();
        const auto kernel = params.at("kernel").get<std::vector<int>>();
        if (kernel.size() != 2) throw Error(ErrorCode::ParseError, "kernel must be [kh, kw]");
        d.kernel_h = kernel[0];
        d.kernel_w = kernel[1];
        d.stride = params.value("stride", 1);
        d.pad = params.value("pad", 0);
        d.groups = params.value("groups", 1);
        if (d.out_channels <= 0 || d.in_channels <= 0 || d.groups <= 0 || d.in_channels % d.groups != 0 ||
            d.out_channels % d.groups != 0) {
          throw Error(ErrorCode::ShapeMismatch, "channel counts must be positive and divisible by groups");
        }
        d.weights = blobs.read(nb.at("weights"), d.weight_count(), "weights");
        d.bias = optional_blob(blobs, nb, "bias", static_cast<std::size_t>(d.out_channels), "bias");
        node.params = std::move(d);
        break;
      }
      case NodeKind::FullyConnected: {
        FcDesc d;
        d.out_features = params.at("out_features").get<int>();
        d.in_features = params.at("in_features").get<int>();
        if (d.out_features <= 0 || d.in_features <= 0) throw Error(ErrorCode::ShapeMismatch, "fc sizes must be positive");
        d.weights = blobs.read(nb.at("weights"), static_cast<std::size_t>(d.out_features) * d.in_features, "weights");
        d.bias = optional_blob(blobs, nb, "bias", static_cast<std::size_t>(d.out_features), "bias");
        node.params = std::move(d);
        break;
      }
      case NodeKind::BatchNorm: {
        BNDesc d;
        d.channels = params.at("channels").get<int>();
        d.epsilon = params.value("epsilon", 1e-5);
        d.placement = parse_placement(params.value("placement", std::string("before_activation")));
        const auto c = static_cast<std::size_t>(d.channels);
        d.mean = blobs.read(nb.at("mean"), c, "mean");
        d.variance = blobs.read(nb.at("variance"), c, "variance");
        d.scale = blobs.read(nb.at("scale"), c, "scale");
        d.shift = blobs.read(nb.at("shift"), c, "shift");
        node.params = std::move(d);
        break;
      }
      case NodeKind::MaxPool:
      case NodeKind::AvgPool: {
        PoolDesc d;
        d.global = params.value("global", false);
        d.kernel = params.value("kernel", 2);
        d.stride = params.value("stride", d.kernel);
        node.params = d;
        break;
      }
      default: break;
    }
  } catch (const Error& e) {
    throw e.with_context("node '" + node.name + "'");
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, "node '" + node.name + "': " + e.what());
  }
  return node;
}

}  // namespace detail

inline ModelGraph load_model(const std::filesystem::path& manifest_path) {
  using detail::json;
  const auto bytes = detail::read_file(manifest_path);
  json doc;
  try {
    doc = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, manifest_path.string() + ": " + e.what());
  }
  ModelGraph g;
  try {
    if (!doc.contains("version")) throw Error(ErrorCode::ParseError, "manifest has no version field");
    if (doc.at("version").get<std::string>() != kManifestVersion) {
      throw Error(ErrorCode::ParseError, "unsupported manifest version '" + doc.at("version").get<std::string>() + "'");
    }
    g.name = doc.value("name", manifest_path.stem().string());
    const json& in = doc.at("input");
    g.input.name = in.at("name").get<std::string>();
    const auto shape = in.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) throw Error(ErrorCode::ParseError, "input shape must be [C, H, W]");
    g.input.channels = shape[0];
    g.input.height = shape[1];
    g.input.width = shape[2];
    g.outputs = doc.at("outputs").get<std::vector<std::string>>();
    g.bn_adjustments = doc.value("bn_adjustments", std::vector<double>{});
    detail::BlobReader blobs(manifest_path.parent_path());
    for (const auto& jn : doc.at("nodes")) g.nodes.push_back(detail::parse_node(jn, blobs));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, manifest_path.string() + ": " + e.what());
  }
  validate(g);
  return g;
}

namespace detail {

class BlobWriter {
 public:
  explicit BlobWriter(std::string file) : file_(std::move(file)) {}

  json append(const std::vector<float>& values) {
    const std::size_t offset = bytes_.size();
    const std::size_t length = values.size() * sizeof(float);
    bytes_.resize(offset + length);
    if (length) std::memcpy(bytes_.data() + offset, values.data(), length);
    return json{{"file", file_}, {"offset", offset}, {"length", length}, {"count", values.size()}};
  }

  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::string file_;
  std::vector<char> bytes_;
};

inline void write_file(const fs::path& path, const char* data, std::size_t size) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write '" + path.string() + "'");
  out.write(data, static_cast<std::streamsize>(size));
  if (!out) throw Error(ErrorCode::IoError, "short write to '" + path.string() + "'");
}

}  // namespace detail

/// Writes `<stem>.json`-style manifest at manifest_path and all blobs into
/// `<stem>.bin` beside it, in node order.
inline void save_model(const ModelGraph& g, const std::filesystem::path& manifest_path) {
  using detail::json;
  const std::string blob_name = manifest_path.stem().string() + ".bin";
  detail::BlobWriter blobs(blob_name);
  json nodes = json::array();
  for (const auto& n : g.nodes) {
    json jn{{"name", n.name}, {"type", to_string(n.kind)}, {"inputs", n.inputs}, {"output", n.output}};
    if (n.multiplier) jn["multiplier"] = to_string(*n.multiplier);
    if (const auto* d = std::get_if<ConvDesc>(&n.params)) {
      jn["params"] = {{"out_channels", d->out_channels}, {"in_channels", d->in_channels},
                      {"kernel", {d->kernel_h, d->kernel_w}},  {"stride", d->stride},
                      {"pad", d->pad},                         {"groups", d->groups}};
      jn["blobs"]["weights"] = blobs.append(d->weights);
      if (!d->bias.empty()) jn["blobs"]["bias"] = blobs.append(d->bias);
    } else if (const auto* f = std::get_if<FcDesc>(&n.params)) {
      jn["params"] = {{"out_features", f->out_features}, {"in_features", f->in_features}};
      jn["blobs"]["weights"] = blobs.append(f->weights);
      if (!f->bias.empty()) jn["blobs"]["bias"] = blobs.append(f->bias);
    } else if (const auto* b = std::get_if<BNDesc>(&n.params)) {
      jn["params"] = {{"channels", b->channels},
                      {"epsilon", b->epsilon},
                      {"placement", detail::placement_string(b->placement)}};
      jn["blobs"]["mean"] = blobs.append(b->mean);
      jn["blobs"]["variance"] = blobs.append(b->variance);
      jn["blobs"]["scale"] = blobs.append(b->scale);
      jn["blobs"]["shift"] = blobs.append(b->shift);
    } else if (const auto* p = std::get_if<PoolDesc>(&n.params)) {
      jn["params"] = p->global ? json{{"global", true}} : json{{"kernel", p->kernel}, {"stride", p->stride}};
    }
    nodes.push_back(std::move(jn));
  }
  json doc{{"version", kManifestVersion},
           {"name", g.name},
           {"input", {{"name", g.input.name}, {"shape", {g.input.channels, g.input.height, g.input.width}}}},
           {"outputs", g.outputs},
           {"nodes", std::move(nodes)}};
  if (!g.bn_adjustments.empty()) doc["bn_adjustments"] = g.bn_adjustments;

  const auto dir = manifest_path.parent_path();
  const std::string text = doc.dump(2) + "\n";
  detail::write_file(dir / blob_name, blobs.bytes().data(), blobs.bytes().size());
  detail::write_file(manifest_path, text.data(), text.size());
}

/// Folds a multiplier's mean error e into every batch-norm node:
/// mean <- (1+e) mean, variance <- (1+e)^2 variance. Nothing else changes.
inline ModelGraph adjust_bn(const ModelGraph& model, double e) {
  if (!(e > -1.0) || !std::isfinite(e)) {
    throw Error(ErrorCode::InvalidSpec, "mean error must be finite and greater than -1");
  }
  ModelGraph out = model;
  const double s = 1.0 + e;
  for (auto& n : out.nodes) {
    if (auto* bn = std::get_if<BNDesc>(&n.params)) {
      for (float& m : bn->mean) m = static_cast<float>(s * m);
      for (float& v : bn->variance) v = static_cast<float>(s * s * v);
    }
  }
  out.bn_adjustments.push_back(e);
  return out;
}

inline std::size_t count_bn_nodes(const ModelGraph& g) {
  std::size_t n = 0;
  for (const auto& node : g.nodes) n += node.kind == NodeKind::BatchNorm;
  return n;
}

/// Same graph with every per-node multiplier override removed.
inline ModelGraph without_overrides(ModelGraph g) {
  for (auto& n : g.nodes) n.multiplier.reset();
  return g;
}

// MNIST IDX ------------------------------------------------------------------

struct LabeledImage {
  Tensor<float> image;  // (1, 1, rows, cols), values in [0, 1]
  int label = 0;
};

namespace detail {

inline std::uint32_t read_be32(const std::vector<char>& b, std::size_t at, const std::string& file) {
  if (at + 4 > b.size()) throw Error(ErrorCode::ParseError, "'" + file + "' is truncated");
  return (static_cast<std::uint32_t>(static_cast<unsigned char>(b[at])) << 24) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 1])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 2])) << 8) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 3]));
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Reads an IDX image/label pair; pixels become byte / 255. At most `limit`
/// samples are returned.
inline std::vector<LabeledImage> load_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                                                std::size_t limit = std::numeric_limits<std::size_t>::max()) {
  const auto ib = detail::read_file(images);
  const auto lb = detail::read_file(labels);
  const std::string in = images.string(), ln = labels.string();
  if (detail::read_be32(ib, 0, in) != kIdxImagesMagic) throw Error(ErrorCode::BadMagic, "'" + in + "' is not an IDX image file");
  if (detail::read_be32(lb, 0, ln) != kIdxLabelsMagic) throw Error(ErrorCode::BadMagic, "'" + ln + "' is not an IDX label file");
  const std::size_t count = detail::read_be32(ib, 4, in);
  const std::size_t rows = detail::read_be32(ib, 8, in);
  const std::size_t cols = detail::read_be32(ib, 12, in);
  const std::size_t label_count = detail::read_be32(lb, 4, ln);
  if (count != label_count) {
    throw Error(ErrorCode::CountMismatch,
                std::to_string(count) + " images but " + std::to_string(label_count) + " labels");
  }
  if (ib.size() < 16 + count * rows * cols) throw Error(ErrorCode::ParseError, "'" + in + "' is truncated");
  if (lb.size() < 8 + count) throw Error(ErrorCode::ParseError, "'" + ln + "' is truncated");

  const std::size_t n = std::min(count, limit);
  std::vector<LabeledImage> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> px(rows * cols);
    const char* src = ib.data() + 16 + i * rows * cols;
    for (std::size_t p = 0; p < px.size(); ++p) {
      px[p] = static_cast<float>(static_cast<unsigned char>(src[p]) / 255.0);
    }
    out.push_back(LabeledImage{Tensor<float>(Shape{1, 1, rows, cols}, std::move(px)),
                               static_cast<int>(static_cast<unsigned char>(lb[8 + i]))});
  }
  return out;
}

}  // namespace approxmac
