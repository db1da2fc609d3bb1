#include "deepwaste/head.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "deepwaste/errors.hpp"
#include "deepwaste/file_util.hpp"
#include "deepwaste/random.hpp"
#include "parallel.hpp"

namespace deepwaste {

HeadWeights HeadWeights::zeros(std::size_t classes, std::size_t features) {
  if (classes == 0 || features == 0) throw InvalidArgument("head needs at least one class and one feature");
  return {classes, features, std::vector<double>(classes * features, 0.0), std::vector<double>(classes, 0.0)};
}

double HeadWeights::squared_norm() const {
  return std::inner_product(W.begin(), W.end(), W.begin(), 0.0);
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw InvalidArgument("learning rate must be finite and non-negative");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("momentum must lie in [0, 1)");
  if (epochs == 0) throw InvalidArgument("epochs must be at least 1");
  if (batch_size == 0) throw InvalidArgument("batch size must be at least 1");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw InvalidArgument("weight decay must be finite and non-negative");
  }
}

namespace {

// Column-wise (x - mean) / scale. Columns with almost no spread only get
// centered so noise is not blown up.
Tensor standardize_columns(const Tensor& x, std::vector<double>& mean, std::vector<double>& scale) {
  const std::size_t N = x.dim(0), F = x.dim(1);
  std::vector<double> sd(F, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f) mean[f] += x[n * F + f];
  for (double& m : mean) m /= static_cast<double>(N);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f) sd[f] += (x[n * F + f] - mean[f]) * (x[n * F + f] - mean[f]);
  double avg = 0.0;
  for (double& s : sd) {
    s = std::sqrt(s / static_cast<double>(N));
    avg += s / static_cast<double>(F);
  }
  for (std::size_t f = 0; f < F; ++f) scale[f] = sd[f] > 1e-3 * avg ? sd[f] : 1.0;
  Tensor out({N, F});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f)
      out[n * F + f] = static_cast<float>((x[n * F + f] - mean[f]) / scale[f]);
  return out;
}

double log_sum_exp(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

void check_shapes(const HeadWeights& head, const Tensor& features, std::span<const std::size_t> labels) {
  if (head.W.size() != head.classes * head.features || head.b.size() != head.classes) {
    throw ShapeError("head weights do not match " + std::to_string(head.classes) + " x " +
                     std::to_string(head.features));
  }
  if (features.rank() != 2 || features.dim(1) != head.features) {
    throw ShapeError("features " + shape_to_string(features.shape()) + " do not match head width " +
                     std::to_string(head.features));
  }
  if (labels.size() != features.dim(0)) {
    throw ShapeError(std::to_string(labels.size()) + " labels for " + std::to_string(features.dim(0)) +
                     " feature rows");
  }
  for (std::size_t y : labels) {
    if (y >= head.classes) throw ShapeError("label " + std::to_string(y) + " out of range");
  }
}

void row_logits(const HeadWeights& head, const float* x, double* z) {
  for (std::size_t k = 0; k < head.classes; ++k) {
    const double* w = head.W.data() + k * head.features;
    double acc = head.b[k];
    for (std::size_t f = 0; f < head.features; ++f) acc += w[f] * x[f];
    z[k] = acc;
  }
}

// Rows `rows` of the feature matrix; accumulates into grad when given.
double batch_loss(const HeadWeights& head, const Tensor& features, std::span<const std::size_t> labels,
                  std::span<const std::size_t> rows, HeadGradient* grad) {
  const std::size_t K = head.classes, F = head.features;
  std::vector<double> z(K);
  double loss = 0.0;
  for (std::size_t n : rows) {
    const float* x = features.raw() + n * F;
    row_logits(head, x, z.data());
    const double lse = log_sum_exp(z);
    loss += lse - z[labels[n]];
    if (!grad) continue;
    for (std::size_t k = 0; k < K; ++k) {
      const double g = std::exp(z[k] - lse) - (k == labels[n] ? 1.0 : 0.0);
      double* dw = grad->dW.data() + k * F;
      for (std::size_t f = 0; f < F; ++f) dw[f] += g * x[f];
      grad->db[k] += g;
    }
  }
  return loss;
}

}  // namespace

double cross_entropy(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) {
    throw InvalidArgument("label " + std::to_string(label) + " out of range for " + std::to_string(logits.size()) +
                          " classes");
  }
  return log_sum_exp(logits) - logits[label];
}

std::vector<double> head_logits(const HeadWeights& head, const Tensor& features) {
  const std::vector<std::size_t> none(features.rank() == 2 ? features.dim(0) : 0, 0);
  check_shapes(head, features, none);
  const std::size_t N = features.dim(0);
  std::vector<double> z(N * head.classes);
  for (std::size_t n = 0; n < N; ++n) row_logits(head, features.raw() + n * head.features, z.data() + n * head.classes);
  return z;
}

std::vector<double> head_probabilities(const HeadWeights& head, const Tensor& features) {
  std::vector<double> p = head_logits(head, features);
  const std::size_t K = head.classes;
  for (std::size_t i = 0; i < p.size(); i += K) {
    const std::span<double> row(p.data() + i, K);
    const double lse = log_sum_exp(row);
    for (double& v : row) v = std::exp(v - lse);
  }
  return p;
}

std::vector<std::size_t> head_predict(const HeadWeights& head, const Tensor& features) {
  const std::vector<double> z = head_logits(head, features);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < z.size(); i += head.classes) {
    out.push_back(static_cast<std::size_t>(std::max_element(z.begin() + i, z.begin() + i + head.classes) -
                                           (z.begin() + i)));
  }
  return out;
}

double head_accuracy(const HeadWeights& head, const Tensor& features, std::span<const std::size_t> labels) {
  const auto pred = head_predict(head, features);
  if (pred.size() != labels.size()) throw ShapeError("label count does not match feature rows");
  if (pred.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

HeadGradient head_gradient(const HeadWeights& head, const Tensor& features, std::span<const std::size_t> labels,
                           double weight_decay) {
  check_shapes(head, features, labels);
  const std::size_t N = features.dim(0);
  if (N == 0) throw ShapeError("empty batch");
  HeadGradient g{std::vector<double>(head.W.size(), 0.0), std::vector<double>(head.classes, 0.0), 0.0};
  std::vector<std::size_t> rows(N);
  std::iota(rows.begin(), rows.end(), 0);
  const double inv = 1.0 / static_cast<double>(N);
  g.loss = batch_loss(head, features, labels, rows, &g) * inv + 0.5 * weight_decay * head.squared_norm();
  for (std::size_t i = 0; i < g.dW.size(); ++i) g.dW[i] = g.dW[i] * inv + weight_decay * head.W[i];
  for (double& v : g.db) v *= inv;
  return g;
}

double head_objective(const HeadWeights& head, const Tensor& features, std::span<const std::size_t> labels,
                      double weight_decay) {
  check_shapes(head, features, labels);
  const std::size_t N = features.dim(0);
  if (N == 0) throw ShapeError("empty batch");
  std::vector<std::size_t> rows(N);
  std::iota(rows.begin(), rows.end(), 0);
  return batch_loss(head, features, labels, rows, nullptr) / static_cast<double>(N) +
         0.5 * weight_decay * head.squared_norm();
}

TrainResult train_head(const Tensor& features, std::span<const std::size_t> labels,
                       const std::vector<std::string>& class_names, const TrainConfig& cfg) {
  cfg.validate();
  const std::size_t K = class_names.size();
  if (features.rank() != 2) throw ShapeError("features must be N x F, got " + shape_to_string(features.shape()));
  const std::size_t N = features.dim(0), F = features.dim(1);
  TrainResult result{HeadWeights::zeros(K, F), {}};
  check_shapes(result.head, features, labels);
  if (N < K) throw InvalidArgument("need at least one example per class (" + std::to_string(N) + " rows, " +
                                   std::to_string(K) + " classes)");
  std::vector<std::size_t> per_class(K, 0);
  for (std::size_t y : labels) ++per_class[y];
  std::string missing;
  for (std::size_t k = 0; k < K; ++k) {
    if (per_class[k] == 0) missing += (missing.empty() ? "" : ", ") + class_names[k];
  }
  if (!missing.empty()) throw InvalidArgument("no training examples for class(es): " + missing);

  std::vector<double> mean(F, 0.0), scale(F, 1.0);
  Tensor standardized;
  if (cfg.standardize) standardized = standardize_columns(features, mean, scale);
  const Tensor& x = cfg.standardize ? standardized : features;

  HeadWeights& head = result.head;
  std::vector<double> vW(head.W.size(), 0.0), vb(K, 0.0);
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  HeadGradient g{std::vector<double>(head.W.size()), std::vector<double>(K), 0.0};
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = Rng::derive(cfg.seed, epoch);
    for (std::size_t i = N; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t start = 0; start < N; start += cfg.batch_size) {
      const std::span<const std::size_t> rows(order.data() + start, std::min(cfg.batch_size, N - start));
      std::fill(g.dW.begin(), g.dW.end(), 0.0);
      std::fill(g.db.begin(), g.db.end(), 0.0);
      batch_loss(head, x, labels, rows, &g);
      const double inv = 1.0 / static_cast<double>(rows.size());
      for (std::size_t i = 0; i < head.W.size(); ++i) {
        vW[i] = cfg.momentum * vW[i] + g.dW[i] * inv + cfg.weight_decay * head.W[i];
        head.W[i] -= cfg.learning_rate * vW[i];
      }
      for (std::size_t k = 0; k < K; ++k) {
        vb[k] = cfg.momentum * vb[k] + g.db[k] * inv;
        head.b[k] -= cfg.learning_rate * vb[k];
      }
    }
    result.loss_history.push_back(head_objective(head, x, labels, cfg.weight_decay));
  }
  if (cfg.standardize) {
    // w . (f - mean) / scale + b  ==  (w / scale) . f + (b - sum w mean / scale)
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t f = 0; f < F; ++f) {
        head.w(k, f) /= scale[f];
        head.b[k] -= head.w(k, f) * mean[f];
      }
    }
  }
  return result;
}

std::string loss_history_csv(std::span<const double> history) {
  std::string out = "epoch,mean_loss\n";
  char buf[64];
  for (std::size_t i = 0; i < history.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i + 1, history[i]);
    out += buf;
  }
  return out;
}

void write_loss_csv(const std::filesystem::path& path, std::span<const double> history) {
  write_file_atomic(path, loss_history_csv(history));
}

Tensor extract_image_features(const Model& model, std::span<const ImageRGB8> images, unsigned threads) {
  if (images.empty()) throw InvalidArgument("no images to extract features from");
  const std::size_t F = model.feature_width();
  Tensor out({images.size(), F});
  detail::parallel_for(images.size(), threads, [&](std::size_t i) {
    const auto f = extract_features(model, to_input_tensor(images[i], model.input_spec()));
    std::copy(f.begin(), f.end(), out.raw() + i * F);
  });
  return out;
}

LabeledFeatures extract_dataset_features(const Model& model, const DatasetStore& store,
                                         std::span<const DatasetItem> items, unsigned threads) {
  if (items.empty()) throw InvalidArgument("no dataset items to extract features from");
  const std::size_t F = model.feature_width();
  LabeledFeatures out{Tensor({items.size(), F}), {}, {}};
  detail::parallel_for(items.size(), threads, [&](std::size_t i) {
    ImageRGB8 img;
    try {
      img = decode(store.read_image_bytes(items[i]));
    } catch (const Error& e) {
      throw DecodeError("dataset item " + items[i].id + ": " + e.what());
    }
    const auto f = extract_features(model, to_input_tensor(img, model.input_spec()));
    std::copy(f.begin(), f.end(), out.features.raw() + i * F);
  });
  for (const auto& item : items) {
    out.labels.push_back(static_cast<std::size_t>(item.label));
    out.ids.push_back(item.id);
  }
  return out;
}

Model attach_head(const Model& model, const HeadWeights& head) {
  const std::size_t F = model.feature_width(), K = model.num_classes();
  if (head.features != F) {
    throw ShapeError("head expects " + std::to_string(head.features) + " features but the backbone produces " +
                     std::to_string(F));
  }
  if (head.classes != K) {
    throw ShapeError("head has " + std::to_string(head.classes) + " classes but the model has " + std::to_string(K));
  }
  Tensor w({F, K}), b({K});
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t f = 0; f < F; ++f) w[f * K + k] = static_cast<float>(head.w(k, f));
    b[k] = static_cast<float>(head.b[k]);
  }
  return model.with_fc(std::move(w), std::move(b));
}

HeadWeights head_from_model(const Model& model) {
  const Tensor& w = model.fc_weights();
  const Tensor& b = model.fc_bias();
  const std::size_t F = w.dim(0), K = w.dim(1);
  HeadWeights head = HeadWeights::zeros(K, F);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t f = 0; f < F; ++f) head.w(k, f) = w[f * K + k];
    head.b[k] = b[k];
  }
  return head;
}

}  // namespace deepwaste
