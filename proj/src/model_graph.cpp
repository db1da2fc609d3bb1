#include "deepwaste/model_graph.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <set>
#include <unordered_map>

#include "deepwaste/errors.hpp"
#include "deepwaste/random.hpp"

namespace deepwaste {
namespace {

constexpr std::pair<OpKind, std::string_view> kOpNames[] = {
    {OpKind::kConv, "conv"},
    {OpKind::kDepthwiseConv, "depthwise_conv"},
    {OpKind::kBatchNorm, "batchnorm"},
    {OpKind::kRelu, "relu"},
    {OpKind::kPool, "pool"},
    {OpKind::kGlobalAvgPool, "global_avg_pool"},
    {OpKind::kFullyConnected, "fully_connected"},
    {OpKind::kSoftmax, "softmax"},
    {OpKind::kAdd, "add"},
};

std::size_t expected_arity(OpKind kind) { return kind == OpKind::kAdd ? 2 : 1; }

template <typename T>
const T& attrs_as(const Node& node) {
  const T* attrs = std::get_if<T>(&node.attrs);
  if (!attrs) {
    throw ValidationError("node '" + node.id + "' (" + std::string(op_kind_name(node.kind)) +
                          ") carries the wrong attribute type");
  }
  return *attrs;
}

Shape infer_shape(const Node& node, const std::vector<const Shape*>& in) {
  const Shape& x = *in[0];
  auto fail = [&](const std::string& why) -> ValidationError {
    return ValidationError("node '" + node.id + "': " + why + " (input " + shape_to_string(x) + ")");
  };
  switch (node.kind) {
    case OpKind::kConv:
    case OpKind::kDepthwiseConv: {
      const auto& a = attrs_as<ConvAttrs>(node);
      if (x.size() != 4) throw fail("expects a 4-D input");
      if (x[1] != a.in_channels) throw fail("expects " + std::to_string(a.in_channels) + " channels");
      if (a.groups == 0 || a.in_channels % a.groups || a.out_channels % a.groups) {
        throw fail("channels not divisible by groups");
      }
      if (node.kind == OpKind::kDepthwiseConv &&
          (a.groups != a.in_channels || a.groups != a.out_channels)) {
        throw fail("depthwise conv needs groups == in_channels == out_channels");
      }
      const std::size_t h = conv_out_extent(x[2], a.kernel.h, a.stride.h, a.padding.h, a.dilation.h);
      const std::size_t w = conv_out_extent(x[3], a.kernel.w, a.stride.w, a.padding.w, a.dilation.w);
      if (h == 0 || w == 0) throw fail("non-positive output size");
      return {x[0], a.out_channels, h, w};
    }
    case OpKind::kBatchNorm: {
      const auto& a = attrs_as<BatchNormAttrs>(node);
      if (x.size() != 4 || x[1] != a.channels) throw fail("expects " + std::to_string(a.channels) + " channels");
      return x;
    }
    case OpKind::kRelu:
      return x;
    case OpKind::kPool: {
      const auto& a = attrs_as<PoolParams>(node);
      if (x.size() != 4) throw fail("expects a 4-D input");
      const std::size_t h = conv_out_extent(x[2], a.kernel.h, a.stride.h, a.padding.h, 1);
      const std::size_t w = conv_out_extent(x[3], a.kernel.w, a.stride.w, a.padding.w, 1);
      if (h == 0 || w == 0 || a.padding.h >= a.kernel.h || a.padding.w >= a.kernel.w) {
        throw fail("window does not fit");
      }
      return {x[0], x[1], h, w};
    }
    case OpKind::kGlobalAvgPool:
      if (x.size() != 4) throw fail("expects a 4-D input");
      return {x[0], x[1]};
    case OpKind::kFullyConnected: {
      const auto& a = attrs_as<FcAttrs>(node);
      if (x.size() != 2 || x[1] != a.in_features) throw fail("expects " + std::to_string(a.in_features) + " features");
      return {x[0], a.out_features};
    }
    case OpKind::kSoftmax:
      if (x.size() != 2) throw fail("expects N x K logits");
      return x;
    case OpKind::kAdd:
      if (*in[0] != *in[1]) {
        throw ValidationError("node '" + node.id + "': add of " + shape_to_string(*in[0]) + " and " +
                              shape_to_string(*in[1]));
      }
      return x;
  }
  throw fail("unknown op");
}

class GraphBuilder {
 public:
  std::string conv(const std::string& id, const std::string& in, std::size_t cin, std::size_t cout,
                   std::size_t k, std::size_t stride, std::size_t pad, std::size_t groups = 1) {
    ConvAttrs a;
    a.in_channels = cin;
    a.out_channels = cout;
    a.kernel = {k, k};
    a.stride = {stride, stride};
    a.padding = {pad, pad};
    a.groups = groups;
    const OpKind kind = groups > 1 && groups == cin && groups == cout ? OpKind::kDepthwiseConv : OpKind::kConv;
    return push({id, kind, a, {in}});
  }
  std::string bn(const std::string& id, const std::string& in, std::size_t channels) {
    return push({id, OpKind::kBatchNorm, BatchNormAttrs{channels, 1e-5f}, {in}});
  }
  std::string relu(const std::string& id, const std::string& in) { return push({id, OpKind::kRelu, {}, {in}}); }
  std::string max_pool(const std::string& id, const std::string& in, std::size_t k, std::size_t s, std::size_t p) {
    return push({id, OpKind::kPool, PoolParams{PoolMode::kMax, {k, k}, {s, s}, {p, p}}, {in}});
  }
  std::string add(const std::string& id, const std::string& a, const std::string& b) {
    return push({id, OpKind::kAdd, {}, {a, b}});
  }
  ModelGraph finish(const std::string& in, std::size_t features, std::size_t num_classes) {
    const std::string gap = push({"avgpool", OpKind::kGlobalAvgPool, {}, {in}});
    const std::string fc = push({"fc", OpKind::kFullyConnected, FcAttrs{features, num_classes}, {gap}});
    graph_.output = push({"softmax", OpKind::kSoftmax, {}, {fc}});
    graph_.feature_tap = gap;
    return std::move(graph_);
  }

 private:
  std::string push(Node node) {
    graph_.nodes.push_back(std::move(node));
    return graph_.nodes.back().id;
  }
  ModelGraph graph_;
};

}  // namespace

std::string_view op_kind_name(OpKind kind) {
  for (const auto& [k, name] : kOpNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

OpKind parse_op_kind(std::string_view name) {
  for (const auto& [k, n] : kOpNames) {
    if (n == name) return k;
  }
  throw FormatError("unknown op kind '" + std::string(name) + "'");
}

const Node* ModelGraph::find(std::string_view id) const {
  auto it = std::find_if(nodes.begin(), nodes.end(), [&](const Node& n) { return n.id == id; });
  return it == nodes.end() ? nullptr : &*it;
}

const Node& ModelGraph::at(std::string_view id) const {
  const Node* node = find(id);
  if (!node) throw ValidationError("no node '" + std::string(id) + "'");
  return *node;
}

std::vector<ParamSpec> ModelGraph::parameters() const {
  std::vector<ParamSpec> specs;
  for (const Node& node : nodes) {
    switch (node.kind) {
      case OpKind::kConv:
      case OpKind::kDepthwiseConv: {
        const auto& a = attrs_as<ConvAttrs>(node);
        specs.push_back({node.id + ".weight", node.id,
                         {a.out_channels, a.in_channels / a.groups, a.kernel.h, a.kernel.w}, true});
        if (a.has_bias) specs.push_back({node.id + ".bias", node.id, {a.out_channels}, true});
        break;
      }
      case OpKind::kBatchNorm: {
        const auto& a = attrs_as<BatchNormAttrs>(node);
        specs.push_back({node.id + ".gamma", node.id, {a.channels}, true});
        specs.push_back({node.id + ".beta", node.id, {a.channels}, true});
        specs.push_back({node.id + ".running_mean", node.id, {a.channels}, false});
        specs.push_back({node.id + ".running_var", node.id, {a.channels}, false});
        break;
      }
      case OpKind::kFullyConnected: {
        const auto& a = attrs_as<FcAttrs>(node);
        specs.push_back({node.id + ".weight", node.id, {a.in_features, a.out_features}, true});
        specs.push_back({node.id + ".bias", node.id, {a.out_features}, true});
        break;
      }
      default:
        break;
    }
  }
  return specs;
}

std::size_t ModelGraph::parameter_count() const {
  std::size_t total = 0;
  for (const ParamSpec& p : parameters()) {
    if (p.trainable) total += shape_numel(p.shape);
  }
  return total;
}

std::size_t ModelGraph::count(OpKind kind) const {
  return static_cast<std::size_t>(
      std::count_if(nodes.begin(), nodes.end(), [&](const Node& n) { return n.kind == kind; }));
}

std::map<std::string, Shape> ModelGraph::validate(const Shape& chw) {
  if (chw.size() != 3) throw ValidationError("graph input must be described as C x H x W");
  if (nodes.empty()) throw ValidationError("graph has no nodes");

  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const std::string& id = nodes[i].id;
    if (id.empty() || id == kGraphInput) throw ValidationError("invalid node id '" + id + "'");
    if (!index.emplace(id, i).second) throw ValidationError("duplicate node id '" + id + "'");
  }

  std::vector<std::size_t> pending(nodes.size(), 0);
  std::vector<std::vector<std::size_t>> consumers(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& node = nodes[i];
    if (node.inputs.size() != expected_arity(node.kind)) {
      throw ValidationError("node '" + node.id + "' (" + std::string(op_kind_name(node.kind)) + ") takes " +
                            std::to_string(expected_arity(node.kind)) + " input(s), has " +
                            std::to_string(node.inputs.size()));
    }
    for (const std::string& in : node.inputs) {
      if (in == kGraphInput) continue;
      auto it = index.find(in);
      if (it == index.end()) throw ValidationError("node '" + node.id + "' reads unknown node '" + in + "'");
      consumers[it->second].push_back(i);
      ++pending[i];
    }
  }

  // Kahn's algorithm; ties resolved by the declared order.
  std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>> ready;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (pending[i] == 0) ready.push(i);
  }
  std::vector<std::size_t> order;
  while (!ready.empty()) {
    const std::size_t i = ready.top();
    ready.pop();
    order.push_back(i);
    for (std::size_t c : consumers[i]) {
      if (--pending[c] == 0) ready.push(c);
    }
  }
  if (order.size() != nodes.size()) {
    std::string stuck;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (pending[i]) stuck += (stuck.empty() ? "" : ", ") + nodes[i].id;
    }
    throw ValidationError("graph has a cycle through: " + stuck);
  }

  auto out_it = index.find(output);
  if (out_it == index.end()) throw ValidationError("graph output '" + output + "' is not a node");
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (i == out_it->second && !consumers[i].empty()) {
      throw ValidationError("graph output '" + output + "' feeds other nodes");
    }
    if (i != out_it->second && consumers[i].empty()) {
      throw ValidationError("node '" + nodes[i].id + "' is a second, undeclared output");
    }
  }
  if (count(OpKind::kGlobalAvgPool) != 1) {
    throw ValidationError("graph needs exactly one global_avg_pool node, has " +
                          std::to_string(count(OpKind::kGlobalAvgPool)));
  }
  auto tap_it = index.find(feature_tap);
  if (tap_it == index.end() || nodes[tap_it->second].kind != OpKind::kGlobalAvgPool) {
    throw ValidationError("feature tap '" + feature_tap + "' must be the global_avg_pool node");
  }

  std::vector<Node> sorted;
  sorted.reserve(nodes.size());
  for (std::size_t i : order) sorted.push_back(std::move(nodes[i]));
  nodes = std::move(sorted);

  const Shape input_shape{1, chw[0], chw[1], chw[2]};
  std::map<std::string, Shape> shapes;
  for (const Node& node : nodes) {
    std::vector<const Shape*> in;
    for (const std::string& id : node.inputs) in.push_back(id == kGraphInput ? &input_shape : &shapes.at(id));
    shapes[node.id] = infer_shape(node, in);
  }
  return shapes;
}

std::map<std::string, Shape> ModelGraph::validated_shapes(const Shape& chw) const {
  ModelGraph copy = *this;
  return copy.validate(chw);
}

ModelGraph build_resnet50(std::size_t num_classes) {
  if (num_classes < 2) throw InvalidArgument("resnet50 needs at least 2 classes");
  GraphBuilder g;
  std::string x = g.conv("conv1", std::string(kGraphInput), 3, 64, 7, 2, 3);
  x = g.bn("bn1", x, 64);
  x = g.relu("relu1", x);
  x = g.max_pool("maxpool", x, 3, 2, 1);

  constexpr std::size_t kWidths[] = {64, 128, 256, 512};
  constexpr std::size_t kBlocks[] = {3, 4, 6, 3};
  constexpr std::size_t kExpansion = 4;
  std::size_t in_ch = 64;
  for (std::size_t stage = 0; stage < 4; ++stage) {
    const std::size_t width = kWidths[stage];
    for (std::size_t block = 0; block < kBlocks[stage]; ++block) {
      const std::string p = "layer" + std::to_string(stage + 1) + "." + std::to_string(block) + ".";
      const std::size_t stride = stage > 0 && block == 0 ? 2 : 1;
      const std::string block_in = x;
      std::string y = g.conv(p + "conv1", block_in, in_ch, width, 1, stride, 0);
      y = g.bn(p + "bn1", y, width);
      y = g.relu(p + "relu1", y);
      y = g.conv(p + "conv2", y, width, width, 3, 1, 1);
      y = g.bn(p + "bn2", y, width);
      y = g.relu(p + "relu2", y);
      y = g.conv(p + "conv3", y, width, width * kExpansion, 1, 1, 0);
      y = g.bn(p + "bn3", y, width * kExpansion);
      std::string shortcut = block_in;
      if (block == 0) {
        shortcut = g.conv(p + "downsample.conv", block_in, in_ch, width * kExpansion, 1, stride, 0);
        shortcut = g.bn(p + "downsample.bn", shortcut, width * kExpansion);
      }
      y = g.add(p + "add", y, shortcut);
      x = g.relu(p + "relu", y);
      in_ch = width * kExpansion;
    }
  }
  return g.finish(x, in_ch, num_classes);
}

ModelGraph build_mobilenet_v1(std::size_t num_classes, double width_multiplier) {
  if (num_classes < 2) throw InvalidArgument("mobilenet_v1 needs at least 2 classes");
  if (!(width_multiplier > 0.0 && width_multiplier <= 1.0)) {
    throw InvalidArgument("mobilenet_v1 width multiplier must be in (0, 1]");
  }
  auto scaled = [&](std::size_t c) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(c * width_multiplier + 1e-9)));
  };
  // (depthwise stride, pointwise output channels) for the 13 separable blocks.
  constexpr std::pair<std::size_t, std::size_t> kBlocks[] = {
      {1, 64},  {2, 128}, {1, 128}, {2, 256}, {1, 256}, {2, 512},  {1, 512},
      {1, 512}, {1, 512}, {1, 512}, {1, 512}, {2, 1024}, {1, 1024},
  };
  GraphBuilder g;
  std::size_t ch = scaled(32);
  std::string x = g.conv("conv0", std::string(kGraphInput), 3, ch, 3, 2, 1);
  x = g.bn("bn0", x, ch);
  x = g.relu("relu0", x);
  for (std::size_t i = 0; i < std::size(kBlocks); ++i) {
    const std::string p = "block" + std::to_string(i + 1) + ".";
    const auto [stride, out] = kBlocks[i];
    const std::size_t out_ch = scaled(out);
    x = g.conv(p + "dw", x, ch, ch, 3, stride, 1, ch);
    x = g.bn(p + "dw_bn", x, ch);
    x = g.relu(p + "dw_relu", x);
    x = g.conv(p + "pw", x, ch, out_ch, 1, 1, 0);
    x = g.bn(p + "pw_bn", x, out_ch);
    x = g.relu(p + "pw_relu", x);
    ch = out_ch;
  }
  return g.finish(x, ch, num_classes);
}

WeightMap random_weights(const ModelGraph& graph, std::uint64_t seed) {
  // Batch norms whose output is summed into a residual are damped.
  std::set<std::string> residual_bn;
  for (const Node& node : graph.nodes) {
    if (node.kind != OpKind::kAdd) continue;
    for (const std::string& in : node.inputs) {
      const Node* src = graph.find(in);
      if (src && src->kind == OpKind::kBatchNorm) residual_bn.insert(in);
    }
  }

  WeightMap weights;
  std::uint64_t stream = 0;
  for (const ParamSpec& spec : graph.parameters()) {
    Rng rng = Rng::derive(seed, stream++);
    Tensor t(spec.shape);
    const Node& node = graph.at(spec.node);
    const std::string_view suffix = std::string_view(spec.name).substr(spec.node.size() + 1);
    auto fill = [&](auto draw) {
      for (float& v : t.data()) v = static_cast<float>(draw());
    };
    if (node.kind == OpKind::kConv || node.kind == OpKind::kDepthwiseConv) {
      if (suffix == "weight") {
        const double fan_in = static_cast<double>(spec.shape[1] * spec.shape[2] * spec.shape[3]);
        const double sd = std::sqrt(2.0 / fan_in);
        fill([&] { return rng.normal() * sd; });
      } else {
        fill([&] { return rng.uniform(-0.05, 0.05); });
      }
    } else if (node.kind == OpKind::kBatchNorm) {
      const bool damped = residual_bn.count(node.id) > 0;
      if (suffix == "gamma") {
        fill([&] { return damped ? rng.uniform(0.2, 0.4) : rng.uniform(0.8, 1.2); });
      } else if (suffix == "beta" || suffix == "running_mean") {
        fill([&] { return rng.uniform(-0.1, 0.1); });
      } else {
        fill([&] { return rng.uniform(0.8, 1.2); });
      }
    } else if (node.kind == OpKind::kFullyConnected) {
      if (suffix == "weight") {
        const double sd = 1.0 / std::sqrt(static_cast<double>(spec.shape[0]));
        fill([&] { return rng.normal() * sd; });
      } else {
        fill([&] { return rng.uniform(-0.1, 0.1); });
      }
    }
    weights.emplace(spec.name, std::move(t));
  }
  return weights;
}

void check_weights(const ModelGraph& graph, const WeightMap& weights) {
  for (const ParamSpec& spec : graph.parameters()) {
    auto it = weights.find(spec.name);
    if (it == weights.end()) {
      throw ValidationError("missing tensor '" + spec.name + "' for node '" + spec.node + "'");
    }
    if (it->second.shape() != spec.shape) {
      throw ValidationError("tensor '" + spec.name + "' has shape " + shape_to_string(it->second.shape()) +
                            ", node '" + spec.node + "' needs " + shape_to_string(spec.shape));
    }
  }
}

}  // namespace deepwaste
