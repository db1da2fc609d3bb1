#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "deepwaste/dataset.hpp"
#include "deepwaste/model.hpp"
#include "json.hpp"

namespace deepwaste {

// Mean of precision@k over the ranks k of the positives, after sorting by
// score descending with ties kept in input order. Throws UndefinedMetric
// when there are no positives, ShapeError on a length mismatch.
double average_precision(std::span<const double> scores, const std::vector<bool>& positives);

// Unweighted mean. Throws InvalidArgument for an empty list.
double mean_average_precision(std::span<const double> per_class_ap);

// counts[true][pred]. Throws InvalidArgument on a length mismatch or a label
// outside [0, classes).
std::vector<std::vector<std::size_t>> confusion_matrix(std::span<const std::size_t> truths,
                                                       std::span<const std::size_t> predictions,
                                                       std::size_t classes);

struct EvalReport {
  std::vector<std::string> labels;
  std::vector<double> ap;                              // per class
  double map = 0.0;                                    // unweighted mean of ap
  std::vector<std::vector<std::size_t>> confusion;     // rows true, columns predicted
  std::vector<std::size_t> counts;                     // items per true class
  std::string model_id;

  nlohmann::json to_json() const;
  // Per-class rows in label order and an Overall row.
  std::string to_table() const;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

// From an N x K confidence matrix (row-major) and the true class of each row.
// One-vs-rest AP per class, argmax for the confusion matrix. Throws
// InvalidArgument when a class has no items.
EvalReport evaluate_scores(std::span<const double> confidences, std::span<const std::size_t> truths,
                           const std::vector<std::string>& labels);

// Runs the model on every item (unaugmented) and scores it. Items are
// processed in parallel; the report does not depend on the thread count.
EvalReport evaluate(const Model& model, const DatasetStore& store, std::span<const DatasetItem> items,
                    unsigned threads = 0);

struct LatencyStats {
  std::size_t runs = 0;
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  double min_ms = 0.0;
  double max_ms = 0.0;

  nlohmann::json to_json() const;
};

// Nearest-rank percentiles. Throws InvalidArgument for an empty sample.
LatencyStats latency_stats(std::span<const double> samples_ms);

// Wall-clock time of `forward` per run; `warmup` runs are discarded first.
// Throws InvalidArgument when runs is 0.
LatencyStats latency_benchmark(const Model& model, const Tensor& input, std::size_t runs, std::size_t warmup = 1);

struct LatencyComparison {
  LatencyStats a;
  LatencyStats b;
  std::vector<double> a_samples_ms;
  std::vector<double> b_samples_ms;
};

// Times two models on the same input in interleaved pairs (the order inside
// each pair alternates), so slow drift of the host affects both alike.
LatencyComparison compare_latency(const Model& a, const Model& b, const Tensor& input, std::size_t runs,
                                  std::size_t warmup = 1);

}  // namespace deepwaste
