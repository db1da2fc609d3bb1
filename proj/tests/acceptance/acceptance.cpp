// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "connect_audit.hpp"
#include "dataset_fixtures.hpp"
#include "deepwaste/dataset.hpp"
#include "deepwaste/evaluation.hpp"
#include "deepwaste/head.hpp"
#include "deepwaste/imaging.hpp"
#include "deepwaste/model.hpp"
#include "deepwaste/nn_ops.hpp"
#include "deepwaste/random.hpp"
#include "image_fixtures.hpp"
#include "oracles.hpp"
#include "service_harness.hpp"
#include "test_util.hpp"

using namespace deepwaste;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  // Records a failed requirement; the first few are kept in the detail line.
  void require(bool ok, const std::string& what) {
    if (ok) return;
    if (pass) detail << "failed: ";
    else detail << "; ";
    detail << what;
    pass = false;
  }
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------

void conv_oracle(Outcome& o) {
  const auto t0 = Clock::now();
  Rng rng(20240611);
  std::size_t configs = 0, stride2 = 0, pad1 = 0, grouped = 0, dense = 0;
  float worst = 0.0f;
  while (configs < 240) {
    const std::size_t n = 1 + rng.below(2);
    const std::size_t c = 1 + rng.below(8);
    const std::size_t h = 3 + rng.below(10), w = 3 + rng.below(10);
    const bool depthwise = rng.bernoulli(0.4);
    const std::size_t groups = depthwise ? c : 1;
    const std::size_t out = depthwise ? c : 1 + rng.below(9);
    const std::size_t kh = 1 + rng.below(5);
    const std::size_t kw = rng.bernoulli(0.7) ? kh : 1 + rng.below(4);
    const std::size_t sh = 1 + rng.below(2), sw = rng.bernoulli(0.8) ? sh : 1 + rng.below(2);
    const std::size_t ph = rng.below(3), pw = rng.bernoulli(0.8) ? ph : rng.below(3);
    if (h + 2 * ph < kh || w + 2 * pw < kw) continue;

    ConvParams p;
    p.in_channels = c;
    p.out_channels = out;
    p.groups = groups;
    p.kernel = {kh, kw};
    p.stride = {sh, sw};
    p.padding = {ph, pw};
    p.weights = oracle::random_tensor({out, c / groups, kh, kw}, rng);
    std::vector<float> bias;
    if (rng.bernoulli(0.5)) {
      p.bias = oracle::random_tensor({out}, rng);
      bias.assign(p.bias->data().begin(), p.bias->data().end());
    }
    const Tensor x = oracle::random_tensor({n, c, h, w}, rng);
    const Tensor fast = conv2d(x, p);
    const Tensor slow = oracle::direct_conv(x, p.weights, p.bias ? &bias : nullptr,
                                            {out, kh, kw, sh, sw, ph, pw, 1, 1, groups});
    if (fast.shape() != slow.shape()) {
      o.require(false, "shape " + shape_to_string(fast.shape()) + " vs " + shape_to_string(slow.shape()));
      return;
    }
    worst = std::max(worst, max_abs_diff(fast, slow));
    ++configs;
    stride2 += sh == 2 || sw == 2;
    pad1 += ph == 1 || pw == 1;
    grouped += groups == c && c > 1;
    dense += groups == 1;
  }
  const double secs = seconds_since(t0);
  o.require(worst <= 1e-5f, "max abs diff " + fmt("%.3g", worst));
  o.require(stride2 > 0 && pad1 > 0 && grouped > 0 && dense > 0, "coverage");
  o.require(secs <= 60.0, "took " + fmt("%.1f s", secs));
  o.detail << (o.pass ? "" : " | ") << configs << " configs (stride 2: " << stride2 << ", pad 1: " << pad1
           << ", groups=C: " << grouped << ", groups=1: " << dense << "), max abs diff " << fmt("%.3g", worst)
           << ", " << fmt("%.2f s", secs);
}

void bn_folding(Outcome& o) {
  const Model unfolded = make_random_model(kArchResNet50, 50, category_labels());
  const Model folded = unfolded.with_folded_batchnorm();
  o.require(unfolded.has_batchnorm() && !folded.has_batchnorm(), "fold left batchnorm nodes");
  Rng rng(51);
  float worst = 0.0f;
  Tensor probe;
  for (int i = 0; i < 10; ++i) {
    const Tensor x = oracle::random_tensor({1, 3, 224, 224}, rng, -2.0, 2.0);
    worst = std::max(worst, max_abs_diff(unfolded.run(x), folded.run(x)));
    if (i == 0) probe = x;
  }
  o.require(worst <= 1e-5f, "output diff " + fmt("%.3g", worst));

  const auto cmp = compare_latency(folded, unfolded, probe, 30, 2);
  o.require(cmp.a.mean_ms <= cmp.b.mean_ms, "folded mean latency above unfolded");
  o.detail << (o.pass ? "" : " | ") << "10 inputs, max output diff " << fmt("%.3g", worst) << "; 30 interleaved runs: folded "
           << fmt("%.2f", cmp.a.mean_ms) << " ms vs unfolded " << fmt("%.2f", cmp.b.mean_ms) << " ms mean";
}

void gradient_check(Outcome& o) {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(7000 + seed);
    const std::size_t K = 2 + rng.below(4), F = 1 + rng.below(16), N = 1 + rng.below(24);
    HeadWeights head = HeadWeights::zeros(K, F);
    for (double& w : head.W) w = rng.uniform(-1, 1);
    for (double& b : head.b) b = rng.uniform(-1, 1);
    const Tensor x = oracle::random_tensor({N, F}, rng, -2, 2);
    std::vector<std::size_t> y(N);
    for (auto& v : y) v = rng.below(K);
    const double lambda = rng.uniform(0, 0.1);
    const HeadGradient g = head_gradient(head, x, y, lambda);
    std::vector<double> analytic = g.dW;
    analytic.insert(analytic.end(), g.db.begin(), g.db.end());
    const auto numeric = oracle::numeric_head_gradient(head.W, head.b, x, y, lambda, 1e-4);
    worst = std::max(worst, oracle::relative_error(analytic, numeric));
  }
  o.require(worst <= 1e-4, "relative error " + fmt("%.3g", worst));
  o.detail << (o.pass ? "" : " | ") << "20 problems, worst relative error " << fmt("%.3g", worst);
}

void ap_oracle(Outcome& o) {
  // Every distinct ordering of each score vector against every non-empty label
  // mask. The second vector has ties.
  std::size_t cases = 0, mismatches = 0;
  const std::vector<std::vector<double>> bases = {
      {0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2}, {0.5, 0.5, 0.3, 0.3, 0.9, 0.1, 0.1, 0.7}};
  for (const auto& base : bases) {
    std::vector<double> scores = base;
    std::sort(scores.begin(), scores.end());
    do {
      for (unsigned mask = 1; mask < 256; ++mask) {
        std::vector<bool> pos(8);
        for (int i = 0; i < 8; ++i) pos[i] = (mask >> i) & 1u;
        ++cases;
        if (average_precision(scores, pos) != oracle::brute_force_ap(scores, pos)) ++mismatches;
      }
    } while (std::next_permutation(scores.begin(), scores.end()));
  }
  const std::vector<double> hand_scores = {0.9, 0.8, 0.7};
  const double hand = average_precision(hand_scores, {true, false, true});
  o.require(mismatches == 0, std::to_string(mismatches) + " mismatches");
  o.require(std::abs(hand - 5.0 / 6.0) <= 1e-6 && std::abs(hand - 0.8333) <= 1e-4, "[P,N,P] gave " + fmt("%.6f", hand));
  o.detail << (o.pass ? "" : " | ") << cases << " permutation/label cases, " << mismatches
           << " mismatches; [P,N,P] = " << fmt("%.6f", hand);
}

void map_arithmetic(Outcome& o) {
  const std::vector<double> ap = {0.761, 0.924, 0.882};
  const double m = mean_average_precision(ap);
  const double reported_overall = 0.881;
  o.require(std::abs(m - 0.8557) <= 1e-4, "mAP " + fmt("%.6f", m));
  // The unweighted mean does not give the reported overall figure.
  o.require(std::abs(m - reported_overall) > 0.02, "unexpectedly matches 0.881");
  o.detail << (o.pass ? "" : " | ") << "mAP(0.761, 0.924, 0.882) = " << fmt("%.6f", m)
           << "; differs from the reported overall 0.881 by " << fmt("%.4f", reported_overall - m)
           << " (not reproducible as an unweighted mean)";
}

void clusters(std::size_t per_class, std::size_t F, std::uint64_t seed, Tensor& x, std::vector<std::size_t>& y) {
  Rng rng(seed);
  const std::size_t N = per_class * 3;
  x = Tensor({N, F});
  y.clear();
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t k = n % 3;
    for (std::size_t f = 0; f < F; ++f) x[n * F + f] = static_cast<float>(rng.normal() + (f == k ? 6.0 : 0.0));
    y.push_back(k);
  }
}

void end_to_end(Outcome& o) {
  const auto t0 = Clock::now();
  testutil::TempDir dir;
  DatasetStore store(dir.path());
  for (const auto& s : make_synthetic_shapes(300, 61, 64)) {
    store.add_item(encode_png(s.image), category_name(s.label), "synthetic", ItemSource::kBundled);
  }
  const auto items = store.list();
  const Model backbone = make_random_model(kArchResNet50, 62, category_labels()).with_folded_batchnorm();
  const LabeledFeatures feats = extract_dataset_features(backbone, store, items);
  const double extract_s = seconds_since(t0);
  TrainConfig cfg;
  cfg.seed = 63;
  const TrainResult trained = train_head(feats.features, feats.labels, category_labels(), cfg);
  const double acc = head_accuracy(trained.head, feats.features, feats.labels);
  const Model full = attach_head(backbone, trained.head);
  const double secs = seconds_since(t0);

  Tensor sx;
  std::vector<std::size_t> sy;
  clusters(100, 16, 7, sx, sy);
  TrainConfig scfg;
  scfg.epochs = 50;
  const double sep = head_accuracy(train_head(sx, sy, category_labels(), scfg).head, sx, sy);

  o.require(items.size() == 300, "dataset has " + std::to_string(items.size()) + " items");
  o.require(full.feature_width() == feats.features.dim(1), "attached head width");
  o.require(secs <= 600.0, "took " + fmt("%.1f s", secs));
  o.require(acc >= 0.90, "training accuracy " + fmt("%.4f", acc));
  o.require(sep >= 0.99, "separable fixture accuracy " + fmt("%.4f", sep));
  o.detail << (o.pass ? "" : " | ") << "300 images, F=" << feats.features.dim(1) << ", training accuracy "
           << fmt("%.4f", acc) << ", separable fixture " << fmt("%.4f", sep) << ", features "
           << fmt("%.1f s", extract_s) << ", total " << fmt("%.1f s", secs);
}

void augmentation_laws(Outcome& o) {
  std::vector<ImageRGB8> fixtures;
  fixtures.push_back(decode(std::span(fixtures::kRedPng)));
  fixtures.push_back(decode(std::span(fixtures::kRgbaPng)));
  fixtures.push_back(decode(std::span(fixtures::kGrayPng)));
  fixtures.push_back(decode(std::span(fixtures::kGrayJpeg)));
  for (const auto& s : make_synthetic_shapes(6, 71, 33)) fixtures.push_back(s.image);
  Rng rng(72);
  for (auto [w, h] : std::vector<std::pair<std::size_t, std::size_t>>{{1, 1}, {2, 3}, {5, 4}, {17, 9}}) {
    ImageRGB8 img(w, h);
    for (std::size_t i = 0; i < w * h * 3; ++i) img.raw()[i] = static_cast<std::uint8_t>(rng.below(256));
    fixtures.push_back(img);
  }

  std::size_t checks = 0;
  for (const auto& img : fixtures) {
    ImageRGB8 r = img;
    for (int i = 0; i < 4; ++i) r = rotate90(r, 1);
    o.require(r == img, "rotate90^4");
    o.require(flip_horizontal(flip_horizontal(img)) == img, "flip^2");
    // every element of the rotation/flip group, composed with its inverse
    for (int k = 0; k < 4; ++k) {
      o.require(rotate90(rotate90(img, k), 4 - k) == img, "rotation inverse");
      o.require(flip_horizontal(rotate90(flip_horizontal(rotate90(img, k)), k)) == img, "reflection inverse");
      checks += 2;
    }
    checks += 2;

    AugmentationPolicy p;
    p.output_width = 24;
    p.output_height = 20;
    p.seed = 73;
    AugmentationPolicy other = p;
    other.seed = 74;
    std::size_t differs = 0;
    for (std::uint64_t i = 0; i < 16; ++i) {
      const ImageRGB8 a = augment(img, p, i);
      o.require(a == augment(img, p, i), "seeded determinism");
      differs += a != augment(img, other, i);
      ++checks;
    }
    // tiny and constant images are fixed points of the whole pipeline
    const bool flat = std::all_of(img.pixels().begin(), img.pixels().end(),
                                  [&](std::uint8_t v) { return v == img.pixels()[0]; });
    if (!flat && img.width() >= 4 && img.height() >= 4) o.require(differs > 0, "seed has no effect");
    // the degenerate policy is the identity up to resize; square inputs need no resize
    if (img.width() == img.height()) {
      o.require(augment(img, AugmentationPolicy::identity(img.width(), img.height()), 5) == img, "identity policy");
      ++checks;
    }
  }
  o.detail << (o.pass ? "" : " | ") << fixtures.size() << " fixture images, " << checks << " law checks";
}

void latency_harness(Outcome& o) {
  const Model model = make_random_model(kArchResNet50, 80, category_labels()).with_folded_batchnorm();
  Rng rng(81);
  const Tensor x = oracle::random_tensor({1, 3, 224, 224}, rng);
  const LatencyStats s = latency_benchmark(model, x, 10, 1);
  o.require(s.runs == 10, "runs");
  o.require(s.max_ms <= 2000.0, "slowest run " + fmt("%.1f ms", s.max_ms));
  o.require(s.min_ms <= s.p50_ms && s.p50_ms <= s.p95_ms && s.p95_ms <= s.max_ms, "percentile order");
  o.require(s.min_ms <= s.mean_ms && s.mean_ms <= s.max_ms, "mean outside [min, max]");
  o.require(s.min_ms > 0.0, "non-positive sample");
  o.detail << (o.pass ? "" : " | ") << "ResNet-50 single image: mean " << fmt("%.1f", s.mean_ms) << " ms, p50 "
           << fmt("%.1f", s.p50_ms) << ", p95 " << fmt("%.1f", s.p95_ms) << ", max " << fmt("%.1f", s.max_ms)
           << " ms (context, not comparable: ~100 ms was reported on a phone neural accelerator)";
}

void service_contract(Outcome& o) {
  using harness::body;
  {
    testutil::TempDir dir;
    fixtures::write_reference_store(dir.path());
    harness::Running svc(harness::small_model(), std::make_shared<DatasetStore>(dir.path()));
    auto r = svc.client->Get("/v1/stats");
    o.require(r && r->status == 200, "stats status");
    if (r) {
      const auto doc = body(r);
      o.require(doc["per_class"]["compost"] == 396 && doc["per_class"]["recycle"] == 427 &&
                    doc["per_class"]["trash"] == 395 && doc["total"] == 1218,
                "fixture stats " + doc.dump());
    }
  }

  testutil::TempDir dir;
  auto store = std::make_shared<DatasetStore>(dir.path());
  const Model model = harness::small_model();
  harness::Running svc(model, store);
  const std::string png = harness::png_of(make_synthetic_shapes(1, 91, 48)[0].image);
  const auto jpeg_bytes = encode_jpeg(decode(png));
  const std::string jpeg(jpeg_bytes.begin(), jpeg_bytes.end());

  audit::reset();
  const auto client_thread = std::this_thread::get_id();
  std::string first;
  for (const auto& [bytes, type] : {std::pair{png, std::string("image/png")}, std::pair{jpeg, std::string("image/jpeg")}}) {
    auto r = svc.upload("/v1/classify", bytes, "", "", type);
    o.require(r && r->status == 200, "classify " + type);
    if (!r) continue;
    const auto doc = body(r);
    double sum = 0.0;
    for (const auto& p : doc["predictions"]) sum += p["confidence"].get<double>();
    o.require(doc["predictions"].size() == 3 && std::abs(sum - 1.0) <= 1e-6, "prediction shape");
    o.require(doc["label"] == doc["predictions"][0]["label"], "verdict is not the top prediction");
    o.require(doc["model_id"] == model.model_id(), "model id");
  }
  const auto seen = audit::connections();
  bool outbound = false;
  for (const auto& c : seen) outbound |= c.thread != client_thread || c.address != "127.0.0.1" || c.port != svc.port;
  o.require(!seen.empty(), "connect audit saw nothing");
  o.require(!outbound, "outbound connection during classification");
  o.require(store->stats().total == 0, "classify wrote to the dataset");

  auto created = svc.upload("/v1/items", png, "compost", "fixture");
  o.require(created && created->status == 201, "contribute status");
  auto again = svc.upload("/v1/items", png, "compost", "fixture");
  o.require(again && again->status == 200, "duplicate contribute status");
  auto stats = svc.client->Get("/v1/stats");
  o.require(stats && body(stats)["per_class"]["compost"] == 1 && body(stats)["total"] == 1, "stats after contribute");
  auto list = svc.client->Get("/v1/items?label=compost");
  o.require(list && body(list)["count"] == 1 && created && body(list)["items"][0]["id"] == body(created)["id"],
            "listed item");
  o.detail << (o.pass ? "" : " | ") << "stats trash 395, recycle 427, compost 396 -> 1218, classify png+jpeg, contribute 201/200, "
           << seen.size() << " connects audited, all client to 127.0.0.1:" << svc.port;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria = {
      {"conv oracle", conv_oracle},
      {"batchnorm folding", bn_folding},
      {"head gradient check", gradient_check},
      {"average precision oracle", ap_oracle},
      {"mAP arithmetic", map_arithmetic},
      {"end-to-end synthetic training", end_to_end},
      {"augmentation laws", augmentation_laws},
      {"latency harness", latency_harness},
      {"service contract", service_contract},
  };
  int failures = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      run(o);
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    failures += !o.pass;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.str().c_str());
    std::fflush(stdout);
  }
  std::printf("%zu criteria, %d failed\n", criteria.size(), failures);
  return failures == 0 ? 0 : 1;
}
