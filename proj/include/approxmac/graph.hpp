// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "approxmac/error.hpp"
#include "approxmac/layers.hpp"
#include "approxmac/multipliers.hpp"
#include "approxmac/tensor.hpp"

namespace approxmac {

enum class NodeKind { Conv, FullyConnected, BatchNorm, Relu, MaxPool, AvgPool, Add, Flatten };

inline std::string to_string(NodeKind k) {
  switch (k) {
    case NodeKind::Conv: return "conv";
    case NodeKind::FullyConnected: return "fc";
    case NodeKind::BatchNorm: return "batchnorm";
    case NodeKind::Relu: return "relu";
    case NodeKind::MaxPool: return "maxpool";
    case NodeKind::AvgPool: return "avgpool";
    case NodeKind::Add: return "add";
    case NodeKind::Flatten: return "flatten";
  }
  return "unknown";
}

inline std::optional<NodeKind> node_kind_from_string(const std::string& s) {
  for (auto k : {NodeKind::Conv, NodeKind::FullyConnected, NodeKind::BatchNorm, NodeKind::Relu, NodeKind::MaxPool,
                 NodeKind::AvgPool, NodeKind::Add, NodeKind::Flatten}) {
    if (to_string(k) == s) return k;
  }
  return std::nullopt;
}

using NodeParams = std::variant<std::monostate, ConvDesc, FcDesc, BNDesc, PoolDesc>;

struct Node {
  std::string name;
  NodeKind kind = NodeKind::Relu;
  std::vector<std::string> inputs;
  std::string output;
  NodeParams params;
  /// Overrides the run-wide multiplier for conv/fc nodes.
  std::optional<MultiplierSpec> multiplier;

  bool multiplies() const { return kind == NodeKind::Conv || kind == NodeKind::FullyConnected; }

  friend bool operator==(const Node&, const Node&) = default;
};

struct GraphInput {
  std::string name;
  std::size_t channels = 1, height = 1, width = 1;

  friend bool operator==(const GraphInput&, const GraphInput&) = default;
};

/// Declarative DAG; nodes are stored in execution (topological) order.
struct ModelGraph {
  std::string name;
  GraphInput input;
  std::vector<std::string> outputs;
  std::vector<Node> nodes;
  /// Mean error factors already folded into the BN statistics, in order.
  std::vector<double> bn_adjustments;

  const Node* find(const std::string& node_name) const {
    for (const auto& n : nodes)
      if (n.name == node_name) return &n;
    return nullptr;
  }

  friend bool operator==(const ModelGraph&, const ModelGraph&) = default;
};

/// Output shape of every edge for a batch of one; throws ShapeMismatch or
/// ParseError naming the offending node.
inline std::map<std::string, Shape> infer_shapes(const ModelGraph& g) {
  std::map<std::string, Shape> shapes;
  shapes[g.input.name] = Shape{1, g.input.channels, g.input.height, g.input.width};
  std::set<std::string> names;
  for (const auto& node : g.nodes) {
    try {
      if (!names.insert(node.name).second) throw Error(ErrorCode::ParseError, "duplicate node name");
      if (shapes.count(node.output)) throw Error(ErrorCode::ParseError, "edge '" + node.output + "' produced twice");
      const std::size_t arity = node.kind == NodeKind::Add ? 2 : 1;
      if (node.inputs.size() != arity) {
        throw Error(ErrorCode::ParseError, "expects " + std::to_string(arity) + " input edge(s)");
      }
      std::vector<Shape> in;
      for (const auto& e : node.inputs) {
        auto it = shapes.find(e);
        if (it == shapes.end()) throw Error(ErrorCode::ParseError, "edge '" + e + "' consumed before produced");
        in.push_back(it->second);
      }
      Shape out;
      switch (node.kind) {
        case NodeKind::Conv: {
          const auto& d = std::get<ConvDesc>(node.params);
          out = conv_output_shape(in[0], d);
          detail::require(d.weights.size() == d.weight_count(), "conv weights hold " +
                                                                    std::to_string(d.weights.size()) + " values, expected " +
                                                                    std::to_string(d.weight_count()));
          detail::require(d.bias.empty() || d.bias.size() == static_cast<std::size_t>(d.out_channels),
                          "conv bias count mismatch");
          break;
        }
        case NodeKind::FullyConnected: {
          const auto& d = std::get<FcDesc>(node.params);
          detail::require(in[0].item_size() == static_cast<std::size_t>(d.in_features),
                          "fc expects " + std::to_string(d.in_features) + " inputs, edge carries " +
                              std::to_string(in[0].item_size()));
          detail::require(d.weights.size() == static_cast<std::size_t>(d.in_features) * d.out_features,
                          "fc weight count mismatch");
          detail::require(d.bias.empty() || d.bias.size() == static_cast<std::size_t>(d.out_features),
                          "fc bias count mismatch");
          out = Shape{1, static_cast<std::size_t>(d.out_features), 1, 1};
          break;
        }
        case NodeKind::BatchNorm: {
          const auto& d = std::get<BNDesc>(node.params);
          const auto c = static_cast<std::size_t>(d.channels);
          detail::require(in[0].c == c, "batchnorm channel count mismatch");
          detail::require(d.mean.size() == c && d.variance.size() == c && d.scale.size() == c && d.shift.size() == c,
                          "batchnorm parameter count mismatch");
          if (!(d.epsilon > 0.0)) throw Error(ErrorCode::ParseError, "batchnorm epsilon must be positive");
          for (float v : d.variance)
            if (v < 0.0f) throw Error(ErrorCode::ParseError, "batchnorm variance must be non-negative");
          out = in[0];
          break;
        }
        case NodeKind::MaxPool:
        case NodeKind::AvgPool: out = pool_output_shape(in[0], std::get<PoolDesc>(node.params)); break;
        case NodeKind::Add:
          detail::require(in[0] == in[1], "add operands differ in shape");
          out = in[0];
          break;
        case NodeKind::Flatten: out = Shape{1, in[0].item_size(), 1, 1}; break;
        case NodeKind::Relu: out = in[0]; break;
      }
      shapes[node.output] = out;
    } catch (const Error& e) {
      throw e.with_context("node '" + node.name + "'");
    } catch (const std::bad_variant_access&) {
      throw Error(ErrorCode::ParseError, "node '" + node.name + "': parameters do not match node type");
    }
  }
  for (const auto& o : g.outputs) {
    if (!shapes.count(o)) throw Error(ErrorCode::ParseError, "graph output '" + o + "' is never produced");
  }
  return shapes;
}

inline void validate(const ModelGraph& g) { (void)infer_shapes(g); }

struct ForwardOptions {
  unsigned threads = 1;
};

template <typename T>
struct ForwardResult {
  /// Every edge, graph input included.
  std::map<std::string, Tensor<T>> tensors;
  /// Narrowing saturations per node name.
  std::map<std::string, std::uint64_t> saturations;

  const Tensor<T>& at(const std::string& edge) const { return tensors.at(edge); }
};

inline MultiplierSpec effective_spec(const Node& node, const MultiplierSpec& global) {
  return node.multiplier.value_or(global);
}

/// Topological execution. T selects the pipeline: QNum (fixed point) or float
/// (binary32, bfloat16 and FP32 reference only).
template <typename T>
ForwardResult<T> forward(const ModelGraph& g, const Tensor<T>& input, const MultiplierSpec& global,
                         const ForwardOptions& opt = {}) {
  ForwardResult<T> r;
  const Shape& is = input.shape();
  if (is.c != g.input.channels || is.h != g.input.height || is.w != g.input.width) {
    throw Error(ErrorCode::ShapeMismatch, "input tensor " + to_string(is) + " does not match graph input '" +
                                              g.input.name + "'");
  }
  r.tensors.emplace(g.input.name, input);
  for (const auto& node : g.nodes) {
    try {
      std::vector<const Tensor<T>*> in;
      for (const auto& e : node.inputs) {
        auto it = r.tensors.find(e);
        if (it == r.tensors.end()) throw Error(ErrorCode::ParseError, "edge '" + e + "' consumed before produced");
        in.push_back(&it->second);
      }
      SaturationCounter sat;
      Tensor<T> out;
      switch (node.kind) {
        case NodeKind::Conv: {
          const Multiplier mul(effective_spec(node, global));
          out = conv2d(*in[0], std::get<ConvDesc>(node.params), mul, sat, opt.threads);
          break;
        }
        case NodeKind::FullyConnected: {
          const Multiplier mul(effective_spec(node, global));
          out = fully_connected(*in[0], std::get<FcDesc>(node.params), mul, sat, opt.threads);
          break;
        }
        case NodeKind::BatchNorm: out = batchnorm_infer(*in[0], std::get<BNDesc>(node.params), sat); break;
        case NodeKind::Relu: out = relu(*in[0]); break;
        case NodeKind::MaxPool: out = maxpool(*in[0], std::get<PoolDesc>(node.params)); break;
        case NodeKind::AvgPool: out = avgpool(*in[0], std::get<PoolDesc>(node.params)); break;
        case NodeKind::Add: out = add(*in[0], *in[1], sat); break;
        case NodeKind::Flatten: out = flatten(*in[0]); break;
      }
      r.saturations[node.name] = sat.count;
      r.tensors.insert_or_assign(node.output, std::move(out));
    } catch (const Error& e) {
      throw e.with_context("node '" + node.name + "'");
    }
  }
  return r;
}

/// Pipeline needed by a run-wide multiplier choice.
enum class Pipeline { Fixed, Real };

inline Pipeline pipeline_for(const MultiplierSpec& spec) {
  return spec.kind == MulKind::Bfloat16 ? Pipeline::Real : Pipeline::Fixed;
}

/// Runs `pipeline` on a binary32 input and returns every edge as real values.
inline std::map<std::string, Tensor<double>> forward_real_values(const ModelGraph& g, const Tensor<float>& input,
                                                                 const MultiplierSpec& global, Pipeline pipeline,
                                                                 const ForwardOptions& opt = {},
                                                                 std::map<std::string, std::uint64_t>* saturations = nullptr) {
  std::map<std::string, Tensor<double>> out;
  auto collect = [&](auto&& result) {
    for (const auto& [k, v] : result.tensors) out.emplace(k, real_tensor(v));
    if (saturations) *saturations = result.saturations;
  };
  if (pipeline == Pipeline::Real) {
    for (const auto& node : g.nodes) {
      if (node.multiplies() && !supports_real_pipeline(effective_spec(node, global).kind)) {
        throw Error(ErrorCode::InvalidSpec, "node '" + node.name + "': " + to_string(effective_spec(node, global)) +
                                                " cannot run in the binary32 pipeline");
      }
    }
    collect(forward<float>(g, input, global, opt));
  } else {
    collect(forward<QNum>(g, convert_tensor<QNum>(input), global, opt));
  }
  return out;
}

}  // namespace approxmac
