#include "deepwaste/model.hpp"

#include <algorithm>
#include <chrono>
#include <limits>
#include <unordered_map>

#include "deepwaste/errors.hpp"
#include "deepwaste/hashing.hpp"
#include "deepwaste/model_io.hpp"

namespace deepwaste {

namespace {

constexpr std::size_t kGraphInputIndex = std::numeric_limits<std::size_t>::max();

ConvParams conv_params(const Node& node, const WeightMap& weights) {
  const auto& a = std::get<ConvAttrs>(node.attrs);
  ConvParams p;
  p.in_channels = a.in_channels;
  p.out_channels = a.out_channels;
  p.kernel = a.kernel;
  p.stride = a.stride;
  p.padding = a.padding;
  p.dilation = a.dilation;
  p.groups = a.groups;
  p.weights = weights.at(node.id + ".weight");
  if (a.has_bias) p.bias = weights.at(node.id + ".bias");
  return p;
}

std::vector<float> as_vector(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

BatchNormParams bn_params(const Node& node, const WeightMap& weights) {
  BatchNormParams p;
  p.gamma = as_vector(weights.at(node.id + ".gamma"));
  p.beta = as_vector(weights.at(node.id + ".beta"));
  p.running_mean = as_vector(weights.at(node.id + ".running_mean"));
  p.running_var = as_vector(weights.at(node.id + ".running_var"));
  p.eps = std::get<BatchNormAttrs>(node.attrs).eps;
  p.validate();
  return p;
}

double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

struct Model::State {
  struct Step {
    OpKind kind;
    std::vector<std::size_t> inputs;
    std::shared_ptr<const ConvParams> conv;
    std::shared_ptr<const BatchNormParams> bn;
    PoolParams pool;
    std::shared_ptr<const Tensor> fc_weights;
    std::shared_ptr<const Tensor> fc_bias;
    bool fuse_relu = false;    // conv writes its output already rectified
    bool passthrough = false;  // relu whose work was done by the conv before it
  };

  std::string architecture;
  ModelGraph graph;
  InputSpec input;
  std::vector<std::string> labels;
  std::vector<Step> steps;
  std::vector<std::size_t> uses;
  std::size_t tap = 0;
  std::size_t output = 0;
  std::size_t fc = 0;
  std::size_t feature_width = 0;
  bool folded = false;
  std::string id;
};

std::shared_ptr<Model::State> Model::compile(std::string architecture, ModelGraph graph, const WeightMap& weights,
                                             InputSpec input, std::vector<std::string> labels, bool folded) {
  if (input.channels != 3) throw ValidationError("input spec must have 3 channels");
  const auto shapes = graph.validate({input.channels, input.height, input.width});
  check_weights(graph, weights);
  if (graph.count(OpKind::kFullyConnected) != 1) {
    throw ValidationError("graph needs exactly one fully_connected classifier node");
  }

  auto state = std::make_shared<State>();
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) index[graph.nodes[i].id] = i;
  state->uses.assign(graph.nodes.size(), 0);

  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    const Node& node = graph.nodes[i];
    State::Step step;
    step.kind = node.kind;
    for (const std::string& in : node.inputs) {
      const std::size_t src = in == kGraphInput ? kGraphInputIndex : index.at(in);
      step.inputs.push_back(src);
      if (src != kGraphInputIndex) ++state->uses[src];
    }
    switch (node.kind) {
      case OpKind::kConv:
      case OpKind::kDepthwiseConv:
        step.conv = std::make_shared<const ConvParams>(conv_params(node, weights));
        break;
      case OpKind::kBatchNorm:
        step.bn = std::make_shared<const BatchNormParams>(bn_params(node, weights));
        break;
      case OpKind::kPool:
        step.pool = std::get<PoolParams>(node.attrs);
        break;
      case OpKind::kFullyConnected:
        step.fc_weights = std::make_shared<const Tensor>(weights.at(node.id + ".weight"));
        step.fc_bias = std::make_shared<const Tensor>(weights.at(node.id + ".bias"));
        state->fc = i;
        break;
      default:
        break;
    }
    state->steps.push_back(std::move(step));
  }

  // A conv read only by a relu clamps in its own epilogue. Unfolded graphs
  // have a batchnorm in between, so this mostly pays off after folding.
  for (auto& step : state->steps) {
    if (step.kind != OpKind::kRelu) continue;
    const std::size_t src = step.inputs.front();
    if (src == kGraphInputIndex || state->uses[src] != 1) continue;
    auto& producer = state->steps[src];
    if (producer.kind == OpKind::kConv || producer.kind == OpKind::kDepthwiseConv) {
      producer.fuse_relu = true;
      step.passthrough = true;
    }
  }

  state->tap = index.at(graph.feature_tap);
  state->output = index.at(graph.output);
  state->feature_width = shapes.at(graph.feature_tap).at(1);
  const std::size_t classes = shapes.at(graph.output).at(1);
  if (labels.size() != classes) {
    throw ValidationError("model has " + std::to_string(classes) + " outputs but " +
                          std::to_string(labels.size()) + " labels");
  }
  if (graph.nodes[state->output].kind != OpKind::kSoftmax) {
    throw ValidationError("graph output '" + graph.output + "' must be a softmax");
  }
  state->architecture = std::move(architecture);
  state->graph = std::move(graph);
  state->input = input;
  state->labels = std::move(labels);
  state->folded = folded;
  return state;
}

Model Model::finish(std::shared_ptr<State> state, std::string model_id) {
  Model model{std::shared_ptr<const State>(state)};
  state->id = model_id.empty() ? sha256_hex(manifest_text(describe_model(model))) : std::move(model_id);
  return model;
}

Model::Model(std::shared_ptr<const State> state) : state_(std::move(state)) {}

Model::Model(std::string architecture, ModelGraph graph, const WeightMap& weights, InputSpec input,
             std::vector<std::string> labels, std::string model_id)
    : Model(finish(compile(std::move(architecture), std::move(graph), weights, input, std::move(labels), false),
                   std::move(model_id))) {}

const std::string& Model::architecture() const { return state_->architecture; }
const ModelGraph& Model::graph() const { return state_->graph; }
const InputSpec& Model::input_spec() const { return state_->input; }
const std::vector<std::string>& Model::labels() const { return state_->labels; }
std::size_t Model::feature_width() const { return state_->feature_width; }
const std::string& Model::model_id() const { return state_->id; }
bool Model::folded() const { return state_->folded; }
bool Model::has_batchnorm() const { return state_->graph.count(OpKind::kBatchNorm) > 0; }
const Tensor& Model::fc_weights() const { return *state_->steps[state_->fc].fc_weights; }
const Tensor& Model::fc_bias() const { return *state_->steps[state_->fc].fc_bias; }

WeightMap Model::weights() const {
  WeightMap out;
  const auto& nodes = state_->graph.nodes;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& step = state_->steps[i];
    const std::string& id = nodes[i].id;
    if (step.conv) {
      out.emplace(id + ".weight", step.conv->weights);
      if (step.conv->bias) out.emplace(id + ".bias", *step.conv->bias);
    } else if (step.bn) {
      const std::size_t c = step.bn->channels();
      out.emplace(id + ".gamma", Tensor({c}, step.bn->gamma));
      out.emplace(id + ".beta", Tensor({c}, step.bn->beta));
      out.emplace(id + ".running_mean", Tensor({c}, step.bn->running_mean));
      out.emplace(id + ".running_var", Tensor({c}, step.bn->running_var));
    } else if (step.fc_weights) {
      out.emplace(id + ".weight", *step.fc_weights);
      out.emplace(id + ".bias", *step.fc_bias);
    }
  }
  return out;
}

Model Model::with_folded_batchnorm() const {
  ModelGraph graph = state_->graph;
  WeightMap weights = this->weights();

  // Count consumers so a conv shared by several readers is left alone.
  std::unordered_map<std::string, std::size_t> readers;
  for (const Node& node : graph.nodes) {
    for (const std::string& in : node.inputs) ++readers[in];
  }
  std::unordered_map<std::string, std::string> renamed;  // removed bn id -> conv id
  std::vector<Node> kept;
  for (Node& node : graph.nodes) {
    for (std::string& in : node.inputs) {
      if (auto it = renamed.find(in); it != renamed.end()) in = it->second;
    }
    if (node.kind == OpKind::kBatchNorm) {
      const std::string& src_id = node.inputs.front();
      auto conv_it = std::find_if(kept.begin(), kept.end(), [&](const Node& n) { return n.id == src_id; });
      if (conv_it != kept.end() &&
          (conv_it->kind == OpKind::kConv || conv_it->kind == OpKind::kDepthwiseConv) &&
          readers[src_id] == 1) {
        const ConvParams folded = fold_batchnorm(conv_params(*conv_it, weights), bn_params(node, weights));
        weights[src_id + ".weight"] = folded.weights;
        weights[src_id + ".bias"] = *folded.bias;
        std::get<ConvAttrs>(conv_it->attrs).has_bias = true;
        for (const char* suffix : {".gamma", ".beta", ".running_mean", ".running_var"}) {
          weights.erase(node.id + suffix);
        }
        renamed[node.id] = src_id;
        if (graph.output == node.id) graph.output = src_id;
        if (graph.feature_tap == node.id) graph.feature_tap = src_id;
        continue;
      }
    }
    kept.push_back(std::move(node));
  }
  graph.nodes = std::move(kept);
  return finish(compile(state_->architecture, std::move(graph), weights, state_->input, state_->labels, true),
                state_->id);
}

Model Model::with_fc(Tensor weights, Tensor bias) const {
  const Tensor& current = fc_weights();
  if (weights.shape() != current.shape() || bias.shape() != fc_bias().shape()) {
    throw ShapeError("classifier parameters " + shape_to_string(weights.shape()) + " / " +
                     shape_to_string(bias.shape()) + " do not fit layer " + shape_to_string(current.shape()));
  }
  auto state = std::make_shared<State>(*state_);
  state->steps[state->fc].fc_weights = std::make_shared<const Tensor>(std::move(weights));
  state->steps[state->fc].fc_bias = std::make_shared<const Tensor>(std::move(bias));
  return finish(std::move(state), {});
}

void Model::check_input(const Tensor& input) const {
  const InputSpec& spec = state_->input;
  if (input.rank() != 4 || input.dim(1) != spec.channels || input.dim(2) != spec.height ||
      input.dim(3) != spec.width) {
    throw ShapeError("model input must be [N, " + std::to_string(spec.channels) + ", " +
                     std::to_string(spec.height) + ", " + std::to_string(spec.width) + "], got " +
                     shape_to_string(input.shape()));
  }
}

Tensor Model::run(const Tensor& input, Stop stop) const {
  check_input(input);
  const State& s = *state_;
  const std::size_t last = stop == Stop::kFeatures ? s.tap : s.output;
  std::vector<Tensor> values(last + 1);
  std::vector<std::size_t> remaining = s.uses;

  auto source = [&](std::size_t idx) -> const Tensor& { return idx == kGraphInputIndex ? input : values[idx]; };
  // Hands over an activation for in-place update when this is its last reader.
  auto take = [&](std::size_t idx) -> Tensor {
    if (idx != kGraphInputIndex && remaining[idx] == 1) return std::move(values[idx]);
    return source(idx);
  };

  for (std::size_t i = 0; i <= last; ++i) {
    const auto& step = s.steps[i];
    Tensor out;
    switch (step.kind) {
      case OpKind::kConv:
      case OpKind::kDepthwiseConv:
        out = conv2d(source(step.inputs[0]), *step.conv, step.fuse_relu);
        break;
      case OpKind::kBatchNorm:
        out = take(step.inputs[0]);
        batchnorm_infer_inplace(out, *step.bn);
        break;
      case OpKind::kRelu:
        out = take(step.inputs[0]);
        if (!step.passthrough) relu_inplace(out);
        break;
      case OpKind::kPool:
        out = pool2d(source(step.inputs[0]), step.pool);
        break;
      case OpKind::kGlobalAvgPool:
        out = global_avg_pool(source(step.inputs[0]));
        break;
      case OpKind::kFullyConnected:
        out = fully_connected(source(step.inputs[0]), *step.fc_weights, *step.fc_bias);
        break;
      case OpKind::kSoftmax:
        out = softmax_rows(source(step.inputs[0]));
        break;
      case OpKind::kAdd: {
        const std::size_t a = step.inputs[0], b = step.inputs[1];
        if (a != b && b != kGraphInputIndex && remaining[b] == 1) {
          out = take(b);
          add_inplace(out, source(a));
        } else {
          out = take(a);
          add_inplace(out, source(b));
        }
        break;
      }
    }
    for (std::size_t in : step.inputs) {
      if (in != kGraphInputIndex && --remaining[in] == 0) values[in] = Tensor();
    }
    values[i] = std::move(out);
  }
  return std::move(values[last]);
}

std::vector<Prediction> forward_batch(const Model& model, const Tensor& input) {
  const auto start = std::chrono::steady_clock::now();
  const Tensor probs = model.run(input);
  const double ms = elapsed_ms(start);
  const std::size_t k = probs.dim(1);
  std::vector<Prediction> out;
  for (std::size_t n = 0; n < probs.dim(0); ++n) {
    Prediction p;
    p.confidences.assign(probs.raw() + n * k, probs.raw() + (n + 1) * k);
    p.predicted = static_cast<std::size_t>(
        std::max_element(p.confidences.begin(), p.confidences.end()) - p.confidences.begin());
    p.label = model.labels()[p.predicted];
    p.latency_ms = ms;
    out.push_back(std::move(p));
  }
  return out;
}

Prediction forward(const Model& model, const Tensor& input) {
  if (input.rank() != 4 || input.dim(0) != 1) {
    throw ShapeError("forward expects a single image [1, C, H, W], got " + shape_to_string(input.shape()));
  }
  return std::move(forward_batch(model, input).front());
}

std::vector<float> extract_features(const Model& model, const Tensor& input) {
  if (input.rank() != 4 || input.dim(0) != 1) {
    throw ShapeError("extract_features expects a single image [1, C, H, W], got " +
                     shape_to_string(input.shape()));
  }
  const Tensor f = model.run(input, Model::Stop::kFeatures);
  return {f.data().begin(), f.data().end()};
}

Model make_random_model(std::string_view architecture, std::uint64_t seed, std::vector<std::string> labels,
                        InputSpec input) {
  ModelGraph graph;
  if (architecture == kArchResNet50) {
    graph = build_resnet50(labels.size());
  } else if (architecture == kArchMobileNetV1) {
    graph = build_mobilenet_v1(labels.size());
  } else {
    throw InvalidArgument("no builder for architecture '" + std::string(architecture) + "'");
  }
  const WeightMap weights = random_weights(graph, seed);
  return Model(std::string(architecture), std::move(graph), weights, input, std::move(labels));
}

}  // namespace deepwaste
