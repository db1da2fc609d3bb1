#include <cmath>
#include <future>
#include <set>
#include <sstream>

#include "connect_audit.hpp"
#include "dataset_fixtures.hpp"
#include "doctest.h"
#include "deepwaste/cli.hpp"
#include "deepwaste/model_io.hpp"
#include "service_harness.hpp"
#include "test_util.hpp"

using namespace deepwaste;
using harness::body;
using harness::png_of;

namespace {

std::string fixture_png(std::uint64_t seed = 1) { return png_of(make_synthetic_shapes(1, seed, 48)[0].image); }

void check_classify_contract(const nlohmann::json& doc, const Model& model) {
  REQUIRE(doc.contains("predictions"));
  const auto& preds = doc["predictions"];
  REQUIRE(preds.size() == 3);
  double sum = 0.0;
  std::set<std::string> labels;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    sum += preds[i]["confidence"].get<double>();
    labels.insert(preds[i]["label"].get<std::string>());
    if (i > 0) CHECK(preds[i - 1]["confidence"].get<double>() >= preds[i]["confidence"].get<double>());
  }
  CHECK(std::abs(sum - 1.0) <= 1e-6);
  CHECK(labels == std::set<std::string>{"trash", "recycle", "compost"});
  CHECK(doc["label"] == preds[0]["label"]);
  CHECK(doc["model_id"] == model.model_id());
  CHECK(doc["latency_ms"].get<double>() >= 0.0);
}

}  // namespace

TEST_CASE("health and model endpoints") {
  const Model model = harness::small_model();
  harness::Running svc(model, nullptr);
  auto r = svc.client->Get("/v1/health");
  REQUIRE(r);
  CHECK(r->status == 200);
  CHECK(body(r)["status"] == "ok");
  CHECK(body(r)["model_id"] == model.model_id());

  r = svc.client->Get("/v1/model");
  REQUIRE(r);
  CHECK(r->status == 200);
  const auto doc = body(r);
  CHECK(doc["model_id"] == model.model_id());
  CHECK(doc["manifest"]["labels"] == nlohmann::json(category_labels()));
  CHECK(doc["manifest"]["magic"] == "DWMODEL");
  // weights are not echoed: the response is a small fraction of the parameters
  CHECK(r->body.size() < 200'000);

  r = svc.client->Get("/v1/nope");
  REQUIRE(r);
  CHECK(r->status == 404);
  CHECK(body(r)["status"] == 404);

  r = svc.client->Get("/v1/stats");
  REQUIRE(r);
  CHECK(r->status == 503);
}

TEST_CASE("classify returns a well-formed, deterministic response") {
  const Model model = harness::small_model();
  harness::Running svc(model, nullptr);
  const std::string png = fixture_png();
  auto a = svc.upload("/v1/classify", png);
  auto b = svc.upload("/v1/classify", png);
  REQUIRE(a);
  REQUIRE(b);
  CHECK(a->status == 200);
  CHECK(a->get_header_value("Content-Type") == "application/json");
  check_classify_contract(body(a), model);
  CHECK(body(a)["predictions"] == body(b)["predictions"]);

  // JPEG and a generic content type are accepted too
  const auto jpeg = encode_jpeg(decode(png));
  auto j = svc.upload("/v1/classify", std::string(jpeg.begin(), jpeg.end()), "", "", "image/jpeg");
  REQUIRE(j);
  CHECK(j->status == 200);
  auto g = svc.upload("/v1/classify", png, "", "", "application/octet-stream");
  REQUIRE(g);
  CHECK(g->status == 200);
}

TEST_CASE("classify error statuses") {
  harness::Running svc(harness::small_model(), nullptr);
  const std::string png = fixture_png();

  auto jpeg = encode_jpeg(decode(png));
  jpeg.resize(jpeg.size() / 2);
  auto r = svc.upload("/v1/classify", std::string(jpeg.begin(), jpeg.end()), "", "", "image/jpeg");
  REQUIRE(r);
  CHECK(r->status == 400);
  CHECK(body(r)["error"].get<std::string>().find("jpeg") != std::string::npos);

  r = svc.upload("/v1/classify", "plain words", "", "", "application/octet-stream");
  REQUIRE(r);
  CHECK(r->status == 400);

  r = svc.upload("/v1/classify", png, "", "", "text/plain");
  REQUIRE(r);
  CHECK(r->status == 422);

  r = svc.client->Post("/v1/classify", png, "image/png");
  REQUIRE(r);
  CHECK(r->status == 422);

  r = svc.client->Post("/v1/classify", httplib::MultipartFormDataItems{{"photo", png, "x.png", "image/png"}});
  REQUIRE(r);
  CHECK(r->status == 422);

  std::string big(kMaxUploadBytes + 1, '\0');
  std::copy(png.begin(), png.end(), big.begin());
  r = svc.upload("/v1/classify", big);
  REQUIRE(r);
  CHECK(r->status == 413);
  CHECK(body(r)["status"] == 413);

  // exactly at the limit is not "too large" (it is a PNG with trailing junk)
  std::string edge(kMaxUploadBytes, '\0');
  std::copy(png.begin(), png.end(), edge.begin());
  r = svc.upload("/v1/classify", edge);
  REQUIRE(r);
  CHECK(r->status != 413);
}

TEST_CASE("contribute, list and stats") {
  testutil::TempDir dir;
  auto store = std::make_shared<DatasetStore>(dir.path());
  harness::Running svc(harness::small_model(), store);
  const std::string png = fixture_png(5);

  auto before = svc.client->Get("/v1/stats");
  REQUIRE(before);
  CHECK(body(before)["total"] == 0);

  // classify has no side effects
  REQUIRE(svc.upload("/v1/classify", png));
  CHECK(store->stats().total == 0);

  auto r = svc.upload("/v1/items", png, "compost", "kitchen counter, daylight");
  REQUIRE(r);
  CHECK(r->status == 201);
  const auto created = body(r);
  CHECK(created["created"] == true);
  const std::string id = created["id"];
  CHECK(created["item"]["source"] == "user_contributed");
  CHECK(created["item"]["split"] == "unassigned");

  auto stats = body(svc.client->Get("/v1/stats"));
  CHECK(stats["total"] == 1);
  CHECK(stats["per_class"]["compost"] == 1);

  auto again = svc.upload("/v1/items", png, "compost");
  REQUIRE(again);
  CHECK(again->status == 200);
  CHECK(body(again)["id"] == id);
  CHECK(body(again)["created"] == false);
  CHECK(body(svc.client->Get("/v1/stats"))["total"] == 1);

  auto conflict = svc.upload("/v1/items", png, "trash");
  REQUIRE(conflict);
  CHECK(conflict->status == 409);

  auto bad_label = svc.upload("/v1/items", fixture_png(6), "plastic");
  REQUIRE(bad_label);
  CHECK(bad_label->status == 400);
  CHECK(body(bad_label)["error"].get<std::string>().find("recycle") != std::string::npos);
  auto bad_image = svc.upload("/v1/items", "nope", "trash", "", "application/octet-stream");
  REQUIRE(bad_image);
  CHECK(bad_image->status == 400);
  CHECK(store->stats().total == 1);

  auto list = svc.client->Get("/v1/items?source=user_contributed");
  REQUIRE(list);
  CHECK(list->status == 200);
  const auto items = body(list)["items"];
  REQUIRE(items.size() == 1);
  CHECK(items[0]["id"] == id);
  CHECK(items[0]["metadata"] == "kitchen counter, daylight");

  CHECK(body(svc.client->Get("/v1/items?label=trash"))["count"] == 0);
  CHECK(body(svc.client->Get("/v1/items?split=unassigned&label=compost"))["count"] == 1);
  auto bad_filter = svc.client->Get("/v1/items?colour=red");
  REQUIRE(bad_filter);
  CHECK(bad_filter->status == 400);
}

TEST_CASE("stats endpoint on the reference-shaped fixture") {
  testutil::TempDir dir;
  fixtures::write_reference_store(dir.path());
  harness::Running svc(harness::small_model(), std::make_shared<DatasetStore>(dir.path()));
  auto r = svc.client->Get("/v1/stats");
  REQUIRE(r);
  CHECK(r->status == 200);
  const auto doc = body(r);
  CHECK(doc["per_class"]["compost"] == 396);
  CHECK(doc["per_class"]["recycle"] == 427);
  CHECK(doc["per_class"]["trash"] == 395);
  CHECK(doc["total"] == 1218);
}

TEST_CASE("cors headers and preflight") {
  ServiceConfig cfg;
  cfg.cors_origin = "http://localhost:5173";
  harness::Running svc(harness::small_model(), nullptr, cfg);
  auto r = svc.client->Get("/v1/health");
  REQUIRE(r);
  CHECK(r->get_header_value("Access-Control-Allow-Origin") == "http://localhost:5173");
  auto pre = svc.client->Options("/v1/classify");
  REQUIRE(pre);
  CHECK(pre->status == 204);
  CHECK(pre->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);
}

TEST_CASE("label notes are attached to the verdict") {
  const Model model = harness::small_model();
  const std::string png = fixture_png();
  const auto p = classify_bytes(model, std::span(reinterpret_cast<const std::uint8_t*>(png.data()), png.size()));
  ServiceConfig cfg;
  cfg.label_notes[p.label] = "check local rules";
  harness::Running svc(model, nullptr, cfg);
  CHECK(body(svc.upload("/v1/classify", png))["note"] == "check local rules");
}

TEST_CASE("classification opens no outbound connections") {
  const Model model = harness::small_model();
  harness::Running svc(model, nullptr);
  const std::string png = fixture_png();
  const auto client_thread = std::this_thread::get_id();
  audit::reset();
  for (int i = 0; i < 3; ++i) {
    auto r = svc.upload("/v1/classify", png);
    REQUIRE(r);
    CHECK(r->status == 200);
  }
  const auto seen = audit::connections();
  // the audit is live: the test client's own connection was recorded
  REQUIRE_FALSE(seen.empty());
  for (const auto& c : seen) {
    CHECK(c.thread == client_thread);
    CHECK(c.address == "127.0.0.1");
    CHECK(c.port == svc.port);
  }
}

TEST_CASE("16 concurrent classify requests agree") {
  harness::Running svc(harness::small_model(), nullptr);
  const std::string png = fixture_png(9);
  std::vector<std::future<std::string>> results;
  for (int i = 0; i < 16; ++i) {
    results.push_back(std::async(std::launch::async, [&] {
      httplib::Client c("127.0.0.1", svc.port);
      c.set_read_timeout(120, 0);
      auto r = c.Post("/v1/classify", httplib::MultipartFormDataItems{{"image", png, "a.png", "image/png"}});
      if (!r || r->status != 200) return std::string("failed");
      return nlohmann::json::parse(r->body)["predictions"].dump();
    }));
  }
  std::set<std::string> distinct;
  for (auto& f : results) distinct.insert(f.get());
  CHECK(distinct.size() == 1);
  CHECK(*distinct.begin() != "failed");
}

TEST_CASE("cli and service print the same predictions") {
  testutil::TempDir dir;
  const Model model = harness::small_model(4);
  save_model_dir(model, dir / "model");
  const Model loaded = load_model_dir(dir / "model", true);
  const std::string png = fixture_png(2);
  write_file_atomic(dir / "x.png", png);

  std::ostringstream out, err;
  const std::string model_dir = (dir / "model").string(), image = (dir / "x.png").string();
  const char* argv[] = {"deepwaste", "--json", "--model", model_dir.c_str(), "classify", image.c_str()};
  REQUIRE(run_cli(6, argv, out, err) == 0);
  const auto cli = nlohmann::json::parse(out.str());

  harness::Running svc(loaded, nullptr);
  const auto http = body(svc.upload("/v1/classify", png));
  CHECK(cli["predictions"].dump() == http["predictions"].dump());
  CHECK(cli["model_id"] == http["model_id"]);
}
