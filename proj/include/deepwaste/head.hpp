#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "deepwaste/dataset.hpp"
#include "deepwaste/imaging.hpp"
#include "deepwaste/model.hpp"
#include "deepwaste/tensor.hpp"

namespace deepwaste {

// Softmax classifier on frozen backbone features. Kept in double so finite
// differences have room below the 1e-4 tolerance.
struct HeadWeights {
  std::size_t classes = 0;
  std::size_t features = 0;
  std::vector<double> W;  // classes x features, row-major
  std::vector<double> b;  // classes

  static HeadWeights zeros(std::size_t classes, std::size_t features);
  double& w(std::size_t k, std::size_t f) { return W[k * features + f]; }
  double w(std::size_t k, std::size_t f) const { return W[k * features + f]; }
  double squared_norm() const;  // of W only

  friend bool operator==(const HeadWeights&, const HeadWeights&) = default;
};

struct TrainConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  // Train on per-feature standardized inputs and fold the scaling back into
  // the returned head. Backbone features share a large common component that
  // leaves plain SGD at lr 0.1 badly conditioned.
  bool standardize = true;

  // Throws InvalidArgument.
  void validate() const;
};

// -log softmax(logits)[label]. Throws InvalidArgument for a bad label.
double cross_entropy(std::span<const double> logits, std::size_t label);

// logits = W x + b for every row of an N x F feature matrix; N x K.
std::vector<double> head_logits(const HeadWeights& head, const Tensor& features);
// Row-wise softmax of head_logits.
std::vector<double> head_probabilities(const HeadWeights& head, const Tensor& features);
std::vector<std::size_t> head_predict(const HeadWeights& head, const Tensor& features);
double head_accuracy(const HeadWeights& head, const Tensor& features, std::span<const std::size_t> labels);

struct HeadGradient {
  std::vector<double> dW;  // like HeadWeights::W
  std::vector<double> db;
  double loss = 0.0;
};

// Gradient of mean cross-entropy + (weight_decay / 2) * ||W||^2 over the
// batch. Throws ShapeError when shapes disagree.
HeadGradient head_gradient(const HeadWeights& head, const Tensor& features, std::span<const std::size_t> labels,
                           double weight_decay);
// The same objective without the gradient.
double head_objective(const HeadWeights& head, const Tensor& features, std::span<const std::size_t> labels,
                      double weight_decay);

struct TrainResult {
  HeadWeights head;
  // Objective over the whole training set after each epoch.
  std::vector<double> loss_history;
};

// Minibatch SGD with momentum from a zero head; the sample order is reshuffled
// every epoch from cfg.seed. With cfg.standardize the loss history is the
// objective in the standardized coordinates (the one being minimized); the
// returned head always applies to raw features. Throws InvalidArgument when a class has no
// examples (the message lists them) or there are fewer rows than classes.
TrainResult train_head(const Tensor& features, std::span<const std::size_t> labels,
                       const std::vector<std::string>& class_names, const TrainConfig& cfg);

// "epoch,mean_loss" rows, epochs counted from 1.
std::string loss_history_csv(std::span<const double> history);
void write_loss_csv(const std::filesystem::path& path, std::span<const double> history);

// Backbone features for each image (N x F), fanned out over `threads`
// workers (0 picks the hardware concurrency). Row order follows the input.
Tensor extract_image_features(const Model& model, std::span<const ImageRGB8> images, unsigned threads = 0);

struct LabeledFeatures {
  Tensor features;                  // N x F
  std::vector<std::size_t> labels;  // class index per row
  std::vector<std::string> ids;
};

// Loads, decodes and runs every item. Throws DecodeError naming the first
// failing item id.
LabeledFeatures extract_dataset_features(const Model& model, const DatasetStore& store,
                                         std::span<const DatasetItem> items, unsigned threads = 0);

// A copy of `model` with the head as its fc layer. Throws ShapeError when the
// feature width or class count differs.
Model attach_head(const Model& model, const HeadWeights& head);
// The model's fc layer as a head.
HeadWeights head_from_model(const Model& model);

}  // namespace deepwaste
