#pragma once

#include <array>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "deepwaste/model_graph.hpp"
#include "deepwaste/tensor.hpp"

namespace deepwaste {

inline constexpr std::string_view kArchResNet50 = "resnet50_v1";
inline constexpr std::string_view kArchMobileNetV1 = "mobilenet_v1";
inline constexpr std::string_view kArchCustom = "custom";

struct InputSpec {
  std::size_t height = 224;
  std::size_t width = 224;
  std::size_t channels = 3;
  // ImageNet channel statistics; images are scaled to [0, 1] before use.
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> std{0.229f, 0.224f, 0.225f};

  friend bool operator==(const InputSpec&, const InputSpec&) = default;
};

struct Prediction {
  std::vector<float> confidences;  // indexed like Model::labels()
  std::size_t predicted = 0;
  std::string label;
  double latency_ms = 0.0;
};

// A validated, executable network. Immutable once constructed; copies share
// parameter storage and concurrent forward passes need no locking.
class Model {
 public:
  // Throws ValidationError if the graph or weights are inconsistent. An empty
  // model_id is replaced by the hash of the manifest the model would save as.
  Model(std::string architecture, ModelGraph graph, const WeightMap& weights, InputSpec input,
        std::vector<std::string> labels, std::string model_id = {});

  const std::string& architecture() const;
  const ModelGraph& graph() const;
  const InputSpec& input_spec() const;
  const std::vector<std::string>& labels() const;
  std::size_t num_classes() const { return labels().size(); }
  std::size_t feature_width() const;
  // Hash of the manifest this model was loaded from (or would be saved as).
  const std::string& model_id() const;
  bool has_batchnorm() const;
  // True once batch norms have been merged into convolutions.
  bool folded() const;

  // Parameter tensors keyed by name.
  WeightMap weights() const;
  // fc layer parameters: weights F x K, bias K.
  const Tensor& fc_weights() const;
  const Tensor& fc_bias() const;

  // Every conv -> batchnorm pair merged into one biased conv.
  Model with_folded_batchnorm() const;
  // Same backbone, new classifier parameters.
  Model with_fc(Tensor weights, Tensor bias) const;

  enum class Stop { kOutput, kFeatures };
  // Runs the graph on an N x C x H x W batch and returns the softmax output
  // (N x K) or the feature tap (N x F).
  Tensor run(const Tensor& input, Stop stop = Stop::kOutput) const;

 private:
  struct State;
  explicit Model(std::shared_ptr<const State> state);
  static std::shared_ptr<State> compile(std::string architecture, ModelGraph graph, const WeightMap& weights,
                                        InputSpec input, std::vector<std::string> labels, bool folded);
  static Model finish(std::shared_ptr<State> state, std::string model_id);
  void check_input(const Tensor& input) const;

  std::shared_ptr<const State> state_;
};

// Single image (1 x 3 x H x W) with wall-clock latency.
Prediction forward(const Model& model, const Tensor& input);
// One prediction per batch row; latency_ms is the whole batch time.
std::vector<Prediction> forward_batch(const Model& model, const Tensor& input);
// Feature-tap activations for a 1 x 3 x H x W input.
std::vector<float> extract_features(const Model& model, const Tensor& input);

// Convenience: random-weight model for a builder architecture.
Model make_random_model(std::string_view architecture, std::uint64_t seed, std::vector<std::string> labels,
                        InputSpec input = {});

}  // namespace deepwaste
