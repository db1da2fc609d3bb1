#include "deepwaste/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "deepwaste/errors.hpp"
#include "deepwaste/imaging.hpp"
#include "parallel.hpp"

namespace deepwaste {

double average_precision(std::span<const double> scores, const std::vector<bool>& positives) {
  if (scores.size() != positives.size()) {
    throw ShapeError(std::to_string(scores.size()) + " scores for " + std::to_string(positives.size()) + " labels");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (!positives[order[rank]]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
  }
  if (hits == 0) throw UndefinedMetric("average precision is undefined without positives");
  return sum / static_cast<double>(hits);
}

double mean_average_precision(std::span<const double> per_class_ap) {
  if (per_class_ap.empty()) throw InvalidArgument("mean average precision of no classes");
  return std::accumulate(per_class_ap.begin(), per_class_ap.end(), 0.0) / static_cast<double>(per_class_ap.size());
}

std::vector<std::vector<std::size_t>> confusion_matrix(std::span<const std::size_t> truths,
                                                       std::span<const std::size_t> predictions,
                                                       std::size_t classes) {
  if (truths.size() != predictions.size()) {
    throw InvalidArgument(std::to_string(truths.size()) + " truths for " + std::to_string(predictions.size()) +
                          " predictions");
  }
  std::vector<std::vector<std::size_t>> counts(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < truths.size(); ++i) {
    if (truths[i] >= classes || predictions[i] >= classes) {
      throw InvalidArgument("label out of range at item " + std::to_string(i));
    }
    ++counts[truths[i]][predictions[i]];
  }
  return counts;
}

namespace {

std::string capitalized(std::string s) {
  if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

}  // namespace

nlohmann::json EvalReport::to_json() const {
  nlohmann::json per_class = nlohmann::json::object();
  for (std::size_t k = 0; k < labels.size(); ++k) per_class[labels[k]] = {{"ap", ap[k]}, {"items", counts[k]}};
  return {{"labels", labels}, {"per_class", per_class}, {"map", map}, {"confusion", confusion},
          {"model_id", model_id}};
}

std::string EvalReport::to_table() const {
  std::string out;
  char line[128];
  std::snprintf(line, sizeof line, "%-10s %8s %8s\n", "Class", "AP", "Items");
  out += line;
  std::size_t total = 0;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    std::snprintf(line, sizeof line, "%-10s %8.4f %8zu\n", capitalized(labels[k]).c_str(), ap[k], counts[k]);
    out += line;
    total += counts[k];
  }
  std::snprintf(line, sizeof line, "%-10s %8.4f %8zu\n", "Overall", map, total);
  out += line;
  return out;
}

EvalReport evaluate_scores(std::span<const double> confidences, std::span<const std::size_t> truths,
                           const std::vector<std::string>& labels) {
  const std::size_t K = labels.size(), N = truths.size();
  if (K == 0) throw InvalidArgument("no classes to evaluate");
  if (confidences.size() != N * K) {
    throw ShapeError("confidence matrix has " + std::to_string(confidences.size()) + " values, expected " +
                     std::to_string(N) + " x " + std::to_string(K));
  }
  EvalReport report;
  report.labels = labels;
  report.counts.assign(K, 0);
  for (std::size_t y : truths) {
    if (y >= K) throw InvalidArgument("label " + std::to_string(y) + " out of range");
    ++report.counts[y];
  }
  std::string missing;
  for (std::size_t k = 0; k < K; ++k) {
    if (report.counts[k] == 0) missing += (missing.empty() ? "" : ", ") + labels[k];
  }
  if (!missing.empty()) throw InvalidArgument("evaluation split has no items of class(es): " + missing);

  std::vector<std::size_t> predicted(N);
  for (std::size_t n = 0; n < N; ++n) {
    const auto row = confidences.subspan(n * K, K);
    predicted[n] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  std::vector<double> scores(N);
  std::vector<bool> positives(N);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t n = 0; n < N; ++n) {
      scores[n] = confidences[n * K + k];
      positives[n] = truths[n] == k;
    }
    report.ap.push_back(average_precision(scores, positives));
  }
  report.map = mean_average_precision(report.ap);
  report.confusion = confusion_matrix(truths, predicted, K);
  return report;
}

EvalReport evaluate(const Model& model, const DatasetStore& store, std::span<const DatasetItem> items,
                    unsigned threads) {
  if (items.empty()) throw InvalidArgument("evaluation split is empty");
  // fixed item order, whatever order the caller passed
  std::vector<DatasetItem> sorted(items.begin(), items.end());
  std::sort(sorted.begin(), sorted.end(), [](const DatasetItem& a, const DatasetItem& b) { return a.id < b.id; });
  const std::size_t K = model.num_classes();
  std::vector<double> confidences(sorted.size() * K);
  detail::parallel_for(sorted.size(), threads, [&](std::size_t i) {
    const ImageRGB8 img = store.load_image(sorted[i]);
    const Prediction p = forward(model, to_input_tensor(img, model.input_spec()));
    std::copy(p.confidences.begin(), p.confidences.end(), confidences.begin() + static_cast<std::ptrdiff_t>(i * K));
  });
  std::vector<std::size_t> truths;
  for (const auto& item : sorted) {
    const auto label = std::string(category_name(item.label));
    const auto it = std::find(model.labels().begin(), model.labels().end(), label);
    if (it == model.labels().end()) throw InvalidArgument("model has no class '" + label + "'");
    truths.push_back(static_cast<std::size_t>(it - model.labels().begin()));
  }
  EvalReport report = evaluate_scores(confidences, truths, model.labels());
  report.model_id = model.model_id();
  return report;
}

nlohmann::json LatencyStats::to_json() const {
  return {{"runs", runs}, {"mean_ms", mean_ms}, {"p50_ms", p50_ms}, {"p95_ms", p95_ms},
          {"min_ms", min_ms}, {"max_ms", max_ms}};
}

LatencyStats latency_stats(std::span<const double> samples_ms) {
  if (samples_ms.empty()) throw InvalidArgument("latency statistics need at least one run");
  std::vector<double> s(samples_ms.begin(), samples_ms.end());
  std::sort(s.begin(), s.end());
  const auto rank = [&](double p) {
    const auto r = static_cast<std::size_t>(std::ceil(p * static_cast<double>(s.size())));
    return s[std::clamp<std::size_t>(r, 1, s.size()) - 1];
  };
  LatencyStats st;
  st.runs = s.size();
  st.mean_ms = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
  st.p50_ms = rank(0.50);
  st.p95_ms = rank(0.95);
  st.min_ms = s.front();
  st.max_ms = s.back();
  // the mean of equal doubles can land an ulp outside [min, max]
  st.mean_ms = std::clamp(st.mean_ms, st.min_ms, st.max_ms);
  return st;
}

namespace {

double time_forward(const Model& model, const Tensor& input) {
  const auto start = std::chrono::steady_clock::now();
  const Prediction p = forward(model, input);
  const auto stop = std::chrono::steady_clock::now();
  (void)p;
  return std::chrono::duration<double, std::milli>(stop - start).count();
}

}  // namespace

LatencyStats latency_benchmark(const Model& model, const Tensor& input, std::size_t runs, std::size_t warmup) {
  if (runs == 0) throw InvalidArgument("latency benchmark needs at least one run");
  for (std::size_t i = 0; i < warmup; ++i) time_forward(model, input);
  std::vector<double> samples;
  for (std::size_t i = 0; i < runs; ++i) samples.push_back(time_forward(model, input));
  return latency_stats(samples);
}

LatencyComparison compare_latency(const Model& a, const Model& b, const Tensor& input, std::size_t runs,
                                  std::size_t warmup) {
  if (runs == 0) throw InvalidArgument("latency comparison needs at least one run");
  for (std::size_t i = 0; i < warmup; ++i) {
    time_forward(a, input);
    time_forward(b, input);
  }
  LatencyComparison c;
  for (std::size_t i = 0; i < runs; ++i) {
    if (i % 2 == 0) {
      c.a_samples_ms.push_back(time_forward(a, input));
      c.b_samples_ms.push_back(time_forward(b, input));
    } else {
      c.b_samples_ms.push_back(time_forward(b, input));
      c.a_samples_ms.push_back(time_forward(a, input));
    }
  }
  c.a = latency_stats(c.a_samples_ms);
  c.b = latency_stats(c.b_samples_ms);
  return c;
}

}  // namespace deepwaste
