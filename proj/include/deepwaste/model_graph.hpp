#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "deepwaste/nn_ops.hpp"
#include "deepwaste/tensor.hpp"

namespace deepwaste {

enum class OpKind {
  kConv,
  kDepthwiseConv,
  kBatchNorm,
  kRelu,
  kPool,
  kGlobalAvgPool,
  kFullyConnected,
  kSoftmax,
  kAdd,
};

std::string_view op_kind_name(OpKind kind);
OpKind parse_op_kind(std::string_view name);

struct ConvAttrs {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  Extent2 kernel{1, 1};
  Extent2 stride{1, 1};
  Extent2 padding{0, 0};
  Extent2 dilation{1, 1};
  std::size_t groups = 1;
  bool has_bias = false;
};

struct BatchNormAttrs {
  std::size_t channels = 1;
  float eps = 1e-5f;
};

struct FcAttrs {
  std::size_t in_features = 1;
  std::size_t out_features = 1;
};

using NodeAttrs = std::variant<std::monostate, ConvAttrs, BatchNormAttrs, PoolParams, FcAttrs>;

// Parameters of node "x" live in the weight table as "x.weight", "x.bias",
// "x.gamma", "x.beta", "x.running_mean" and "x.running_var".
struct Node {
  std::string id;
  OpKind kind = OpKind::kRelu;
  NodeAttrs attrs;
  std::vector<std::string> inputs;  // node ids, or kGraphInput
};

inline constexpr std::string_view kGraphInput = "input";

struct ParamSpec {
  std::string name;
  std::string node;
  Shape shape;
  bool trainable = true;  // batch-norm running statistics are buffers
};

using WeightMap = std::map<std::string, Tensor>;

class ModelGraph {
 public:
  std::vector<Node> nodes;
  std::string output;
  std::string feature_tap;

  const Node* find(std::string_view id) const;
  const Node& at(std::string_view id) const;

  // Every parameter tensor in node order.
  std::vector<ParamSpec> parameters() const;
  // Trainable scalar count (running statistics excluded).
  std::size_t parameter_count() const;
  std::size_t count(OpKind kind) const;

  // Checks acyclicity, id uniqueness, the single-output and feature-tap rules
  // and shape consistency for a batch-1 input of the given C x H x W. Nodes
  // are left in a valid topological order. Returns each node's output shape.
  std::map<std::string, Shape> validate(const Shape& chw);

  // Same checks on a copy.
  std::map<std::string, Shape> validated_shapes(const Shape& chw) const;
};

// ResNet-50 v1: stride 2 sits on the first 1x1 of a downsampling bottleneck
// and on its 1x1 projection shortcut.
ModelGraph build_resnet50(std::size_t num_classes);
ModelGraph build_mobilenet_v1(std::size_t num_classes, double width_multiplier = 1.0);

// He-normal convolutions, near-identity batch norms (residual-closing ones
// damped so depth does not blow up activations) and a small random head.
WeightMap random_weights(const ModelGraph& graph, std::uint64_t seed);

// Throws ValidationError naming the first missing or mis-shaped tensor.
void check_weights(const ModelGraph& graph, const WeightMap& weights);

}  // namespace deepwaste
