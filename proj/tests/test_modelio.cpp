// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <vector>

#include <unistd.h>

#include <gtest/gtest.h>
#include <json.hpp>

#include "approxmac/modelio.hpp"

using namespace approxmac;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kFixtures = APPROXMAC_FIXTURES;

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("approxmac_modelio_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

void spit_floats(const fs::path& p, const std::vector<float>& v) {
  std::string bytes(v.size() * 4, '\0');
  std::memcpy(bytes.data(), v.data(), bytes.size());
  spit(p, bytes);
}

json blob(std::size_t offset, std::size_t count, std::size_t length = 0) {
  return {{"file", "m.bin"}, {"offset", offset}, {"length", length ? length : count * 4}, {"count", count}};
}

/// data(1x2x2) -> conv(1->1, 1x1) -> relu.
json tiny_manifest() {
  return {{"version", "1"},
          {"name", "tiny"},
          {"input", {{"name", "data"}, {"shape", {1, 2, 2}}}},
          {"outputs", {"r"}},
          {"nodes",
           {{{"name", "conv"},
             {"type", "conv"},
             {"inputs", {"data"}},
             {"output", "c"},
             {"params", {{"out_channels", 1}, {"in_channels", 1}, {"kernel", {1, 1}}}},
             {"blobs", {{"weights", blob(0, 1)}, {"bias", blob(4, 1)}}}},
            {{"name", "relu"}, {"type", "relu"}, {"inputs", {"c"}}, {"output", "r"}}}}};
}

ErrorCode load_error(const fs::path& p, std::string* what = nullptr) {
  try {
    (void)load_model(p);
  } catch (const Error& e) {
    if (what) *what = e.what();
    return e.code();
  }
  return ErrorCode::Internal;
}

std::vector<std::uint8_t> be32(std::uint32_t v) {
  return {static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 8),
          static_cast<std::uint8_t>(v)};
}

void write_idx(const fs::path& images, const fs::path& labels, std::uint32_t image_magic, std::uint32_t n_images,
               std::uint32_t n_labels) {
  std::string ib, lb;
  for (auto v : {image_magic, n_images, 2u, 2u})
    for (auto b : be32(v)) ib.push_back(static_cast<char>(b));
  for (std::uint32_t i = 0; i < n_images * 4; ++i) ib.push_back(static_cast<char>(i == 0 ? 255 : i * 10));
  for (auto v : {kIdxLabelsMagic, n_labels})
    for (auto b : be32(v)) lb.push_back(static_cast<char>(b));
  for (std::uint32_t i = 0; i < n_labels; ++i) lb.push_back(static_cast<char>(i % 10));
  spit(images, ib);
  spit(labels, lb);
}

}  // namespace

// Manifest loading ----------------------------------------------------------------

TEST(LoadModel, MinimalManifest) {
  TempDir t;
  spit(t.path() / "m.json", tiny_manifest().dump());
  spit_floats(t.path() / "m.bin", {2.0f, -0.5f});
  const auto g = load_model(t.path() / "m.json");
  ASSERT_EQ(g.nodes.size(), 2u);
  EXPECT_EQ(g.name, "tiny");
  const auto& c = std::get<ConvDesc>(g.nodes[0].params);
  EXPECT_EQ(c.weights, std::vector<float>{2.0f});
  EXPECT_EQ(c.bias, std::vector<float>{-0.5f});
  const Tensor<QNum> x({1, 1, 2, 2}, std::vector<QNum>{quantize(1), quantize(-1), quantize(0.5), quantize(0)});
  const auto y = forward<QNum>(g, x, MultiplierSpec::exact()).at("r");
  EXPECT_EQ(to_real(y.data()[0]), 1.5);
  EXPECT_EQ(to_real(y.data()[1]), 0.0);
  EXPECT_EQ(to_real(y.data()[2]), 0.5);
}

TEST(LoadModel, BlobLengthOffByOneNamesNode) {
  TempDir t;
  auto m = tiny_manifest();
  m["nodes"][0]["blobs"]["weights"] = blob(0, 1, 5);
  spit(t.path() / "m.json", m.dump());
  spit_floats(t.path() / "m.bin", {2.0f, -0.5f});
  std::string what;
  EXPECT_EQ(load_error(t.path() / "m.json", &what), ErrorCode::ShapeMismatch);
  EXPECT_NE(what.find("node 'conv'"), std::string::npos) << what;
}

TEST(LoadModel, CountDisagreesWithShape) {
  TempDir t;
  auto m = tiny_manifest();
  m["nodes"][0]["blobs"]["weights"] = blob(0, 2);
  spit(t.path() / "m.json", m.dump());
  spit_floats(t.path() / "m.bin", {2.0f, -0.5f});
  EXPECT_EQ(load_error(t.path() / "m.json"), ErrorCode::ShapeMismatch);
}

TEST(LoadModel, BlobPastEndOfFile) {
  TempDir t;
  auto m = tiny_manifest();
  m["nodes"][0]["blobs"]["bias"] = blob(8, 1);
  spit(t.path() / "m.json", m.dump());
  spit_floats(t.path() / "m.bin", {2.0f, -0.5f});
  EXPECT_EQ(load_error(t.path() / "m.json"), ErrorCode::ShapeMismatch);
}

TEST(LoadModel, NonFiniteWeight) {
  TempDir t;
  spit(t.path() / "m.json", tiny_manifest().dump());
  for (float bad : {std::numeric_limits<float>::quiet_NaN(), std::numeric_limits<float>::infinity()}) {
    spit_floats(t.path() / "m.bin", {bad, 0.0f});
    std::string what;
    EXPECT_EQ(load_error(t.path() / "m.json", &what), ErrorCode::NonFiniteWeight);
    EXPECT_NE(what.find("conv"), std::string::npos);
  }
}

TEST(LoadModel, StructuralErrors) {
  TempDir t;
  spit_floats(t.path() / "m.bin", {2.0f, -0.5f});
  const auto p = t.path() / "m.json";

  auto m = tiny_manifest();
  m.erase("version");
  spit(p, m.dump());
  EXPECT_EQ(load_error(p), ErrorCode::ParseError);

  m = tiny_manifest();
  m["version"] = "2";
  spit(p, m.dump());
  EXPECT_EQ(load_error(p), ErrorCode::ParseError);

  m = tiny_manifest();
  m["nodes"][1]["type"] = "softmax";
  spit(p, m.dump());
  EXPECT_EQ(load_error(p), ErrorCode::ParseError);

  m = tiny_manifest();
  m["nodes"][1]["inputs"] = {"nope"};
  spit(p, m.dump());
  EXPECT_EQ(load_error(p), ErrorCode::ParseError);

  m = tiny_manifest();
  m["nodes"][0]["multiplier"] = "mitchw:w=1";
  spit(p, m.dump());
  EXPECT_EQ(load_error(p), ErrorCode::InvalidSpec);

  spit(p, "{ not json");
  EXPECT_EQ(load_error(p), ErrorCode::ParseError);

  EXPECT_EQ(load_error(t.path() / "absent.json"), ErrorCode::IoError);
}

TEST(LoadModel, PerNodeMultiplier) {
  TempDir t;
  auto m = tiny_manifest();
  m["nodes"][0]["multiplier"] = "mitchw:w=6:sign=c1";
  spit(t.path() / "m.json", m.dump());
  spit_floats(t.path() / "m.bin", {2.0f, -0.5f});
  const auto g = load_model(t.path() / "m.json");
  EXPECT_EQ(g.nodes[0].multiplier, MultiplierSpec::mitchw(6, SignMode::OnesComplement));
  EXPECT_FALSE(without_overrides(g).nodes[0].multiplier.has_value());
}

TEST(LoadModel, LenetFixture) {
  const auto g = load_model(kFixtures / "lenet" / "lenet.json");
  ASSERT_EQ(g.nodes.size(), 7u);
  const std::vector<std::string> names{"conv1", "pool1", "conv2", "pool2", "fc1", "relu1", "fc2"};
  for (std::size_t i = 0; i < names.size(); ++i) EXPECT_EQ(g.nodes[i].name, names[i]);
  const auto shapes = infer_shapes(g);
  EXPECT_EQ(shapes.at("conv1"), (Shape{1, 6, 24, 24}));
  EXPECT_EQ(shapes.at("pool2"), (Shape{1, 16, 4, 4}));
  EXPECT_EQ(shapes.at("fc2"), (Shape{1, 10, 1, 1}));
  EXPECT_EQ(count_bn_nodes(g), 0u);
}

TEST(LoadModel, AllFixturesValidate) {
  for (const char* f : {"lenet/lenet.json", "stack20/stack20_bn.json", "stack20/stack20_nobn.json",
                        "convtypes/convtypes.json", "residual/residual.json"}) {
    EXPECT_NO_THROW((void)load_model(kFixtures / f)) << f;
  }
  EXPECT_EQ(count_bn_nodes(load_model(kFixtures / "stack20/stack20_bn.json")), 20u);
}

// Saving --------------------------------------------------------------------------

TEST(SaveModel, RoundTrip) {
  TempDir t;
  for (const char* f : {"lenet/lenet.json", "residual/residual.json", "convtypes/convtypes.json"}) {
    const auto g = load_model(kFixtures / f);
    save_model(g, t.path() / "copy.json");
    EXPECT_EQ(load_model(t.path() / "copy.json"), g) << f;
  }
}

TEST(SaveModel, ZeroAdjustmentKeepsBlobBytes) {
  TempDir t;
  const auto g = load_model(kFixtures / "stack20/stack20_bn.json");
  save_model(g, t.path() / "a.json");
  save_model(adjust_bn(g, 0.0), t.path() / "b.json");
  EXPECT_EQ(slurp(t.path() / "a.bin"), slurp(t.path() / "b.bin"));
  EXPECT_EQ(load_model(t.path() / "b.json").bn_adjustments, std::vector<double>{0.0});
}

TEST(SaveModel, UnwritableTarget) {
  const auto g = load_model(kFixtures / "lenet/lenet.json");
  try {
    save_model(g, "/nonexistent_dir_approxmac/x.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IoError);
  }
}

// Batch-norm adjustment -----------------------------------------------------------

TEST(AdjustBn, Example) {
  ModelGraph g;
  g.input = {"x", 1, 1, 1};
  g.outputs = {"b"};
  BNDesc bn;
  bn.channels = 1;
  bn.mean = {1.0f};
  bn.variance = {1.0f};
  bn.scale = {1.5f};
  bn.shift = {0.25f};
  Node n;
  n.name = "bn";
  n.kind = NodeKind::BatchNorm;
  n.inputs = {"x"};
  n.output = "b";
  n.params = bn;
  g.nodes.push_back(n);
  const auto a = adjust_bn(g, -0.059);
  const auto& d = std::get<BNDesc>(a.nodes[0].params);
  EXPECT_FLOAT_EQ(d.mean[0], 0.941f);
  EXPECT_FLOAT_EQ(d.variance[0], static_cast<float>(0.941 * 0.941));
  EXPECT_NEAR(d.variance[0], 0.885, 0.0005);
  EXPECT_EQ(d.scale, bn.scale);
  EXPECT_EQ(d.shift, bn.shift);
  EXPECT_EQ(a.bn_adjustments, std::vector<double>{-0.059});
}

TEST(AdjustBn, ComposesMultiplicatively) {
  const auto g = load_model(kFixtures / "stack20/stack20_bn.json");
  const double e1 = -0.03, e2 = 0.02;
  const auto twice = adjust_bn(adjust_bn(g, e1), e2);
  const auto once = adjust_bn(g, (1 + e1) * (1 + e2) - 1);
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    if (const auto* a = std::get_if<BNDesc>(&twice.nodes[i].params)) {
      const auto& b = std::get<BNDesc>(once.nodes[i].params);
      for (std::size_t c = 0; c < a->mean.size(); ++c) {
        EXPECT_NEAR(a->mean[c], b.mean[c], 1e-6 * std::fabs(b.mean[c]) + 1e-12);
        EXPECT_NEAR(a->variance[c], b.variance[c], 1e-6 * b.variance[c] + 1e-12);
      }
    }
  }
}

TEST(AdjustBn, TouchesOnlyMeanAndVariance) {
  const auto g = load_model(kFixtures / "residual/residual.json");
  const auto a = adjust_bn(g, -0.059);
  ASSERT_EQ(a.nodes.size(), g.nodes.size());
  std::size_t changed = 0;
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    if (const auto* b0 = std::get_if<BNDesc>(&g.nodes[i].params)) {
      auto b1 = std::get<BNDesc>(a.nodes[i].params);
      EXPECT_NE(b1.mean, b0->mean);
      b1.mean = b0->mean;
      b1.variance = b0->variance;
      EXPECT_EQ(b1, *b0);
      ++changed;
    } else {
      EXPECT_EQ(a.nodes[i], g.nodes[i]);
    }
  }
  EXPECT_EQ(changed, count_bn_nodes(g));
  EXPECT_EQ(a.input, g.input);
  EXPECT_EQ(a.outputs, g.outputs);
}

TEST(AdjustBn, RejectsInvalidFactor) {
  const auto g = load_model(kFixtures / "lenet/lenet.json");
  for (double e : {-1.0, -2.0, std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::infinity()}) {
    try {
      (void)adjust_bn(g, e);
      FAIL() << e;
    } catch (const Error& err) {
      EXPECT_EQ(err.code(), ErrorCode::InvalidSpec);
    }
  }
}

// IDX ---------------------------------------------------------------------------

TEST(MnistIdx, SyntheticFile) {
  TempDir t;
  write_idx(t.path() / "i", t.path() / "l", kIdxImagesMagic, 4, 4);
  const auto d = load_mnist_idx(t.path() / "i", t.path() / "l");
  ASSERT_EQ(d.size(), 4u);
  EXPECT_EQ(d[0].image.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(d[0].image.data()[0], 1.0f);
  EXPECT_EQ(d[0].image.data()[1], static_cast<float>(10 / 255.0));
  EXPECT_EQ(d[3].label, 3);
  EXPECT_EQ(load_mnist_idx(t.path() / "i", t.path() / "l", 2).size(), 2u);
}

TEST(MnistIdx, Errors) {
  TempDir t;
  auto code = [&] {
    try {
      (void)load_mnist_idx(t.path() / "i", t.path() / "l");
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::Internal;
  };
  write_idx(t.path() / "i", t.path() / "l", 0x0804, 4, 4);
  EXPECT_EQ(code(), ErrorCode::BadMagic);
  write_idx(t.path() / "i", t.path() / "l", kIdxImagesMagic, 4, 3);
  EXPECT_EQ(code(), ErrorCode::CountMismatch);
  write_idx(t.path() / "i", t.path() / "l", kIdxImagesMagic, 4, 4);
  auto bytes = slurp(t.path() / "i");
  spit(t.path() / "i", bytes.substr(0, bytes.size() - 1));
  EXPECT_EQ(code(), ErrorCode::ParseError);
}

TEST(MnistIdx, Fixture) {
  const auto d = load_mnist_idx(kFixtures / "mnist/t1k-images.idx3", kFixtures / "mnist/t1k-labels.idx1");
  ASSERT_EQ(d.size(), 1000u);
  for (const auto& s : d) {
    ASSERT_GE(s.label, 0);
    ASSERT_LE(s.label, 9);
    for (float v : s.image.data()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  }
}
