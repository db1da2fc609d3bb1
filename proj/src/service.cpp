#include "deepwaste/service.hpp"

#include <algorithm>
#include <numeric>
#include <thread>

#include "deepwaste/errors.hpp"
#include "deepwaste/imaging.hpp"
#include "deepwaste/model_io.hpp"
#include "httplib.h"

namespace deepwaste {

using nlohmann::json;

json classify_response(const Model& model, const Prediction& prediction,
                       const std::map<std::string, std::string>& label_notes) {
  const auto& labels = model.labels();
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return prediction.confidences[a] > prediction.confidences[b];
  });
  json preds = json::array();
  for (std::size_t k : order) preds.push_back({{"label", labels[k]}, {"confidence", prediction.confidences[k]}});
  json out{{"predictions", std::move(preds)},
           {"label", prediction.label},
           {"model_id", model.model_id()},
           {"latency_ms", prediction.latency_ms}};
  if (const auto it = label_notes.find(prediction.label); it != label_notes.end()) out["note"] = it->second;
  return out;
}

Prediction classify_bytes(const Model& model, std::span<const std::uint8_t> bytes) {
  const ImageRGB8 img = decode(bytes);
  return forward(model, to_input_tensor(img, model.input_spec()));
}

json item_to_json(const DatasetItem& item) {
  return {{"id", item.id},
          {"image", item.image},
          {"label", category_name(item.label)},
          {"metadata", item.metadata},
          {"source", source_name(item.source)},
          {"split", split_name(item.split)},
          {"created_at", item.created_at}};
}

json stats_to_json(const DatasetStats& stats) {
  json per_class = json::object();
  for (std::size_t k = 0; k < kNumCategories; ++k) per_class[category_labels()[k]] = stats.per_class[k];
  return {{"per_class", per_class}, {"total", stats.total}};
}

namespace {

constexpr const char* kJson = "application/json";

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), kJson);
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", message}, {"status", status}});
}

std::span<const std::uint8_t> as_bytes(const std::string& s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

bool image_content_type(const std::string& type) {
  // browsers often label picked files generically; the bytes are sniffed anyway
  return type.empty() || type == "image/png" || type == "image/jpeg" || type == "image/jpg" ||
         type == "application/octet-stream";
}

// The "image" part of a multipart upload, or an error already written to res.
const httplib::MultipartFormData* image_part(const httplib::Request& req, httplib::Response& res,
                                             std::size_t max_bytes) {
  if (!req.is_multipart_form_data()) {
    send_error(res, 422, "expected multipart/form-data with an \"image\" field");
    return nullptr;
  }
  const auto it = req.files.find("image");
  if (it == req.files.end()) {
    send_error(res, 422, "multipart upload has no \"image\" field");
    return nullptr;
  }
  const auto& part = it->second;
  if (part.content.size() > max_bytes) {
    send_error(res, 413, "image is " + std::to_string(part.content.size()) + " bytes; the limit is " +
                             std::to_string(max_bytes));
    return nullptr;
  }
  if (!image_content_type(part.content_type)) {
    send_error(res, 422, "unsupported content type '" + part.content_type + "' (expected image/png or image/jpeg)");
    return nullptr;
  }
  return &part;
}

std::string form_value(const httplib::Request& req, const std::string& key) {
  const auto it = req.files.find(key);
  if (it != req.files.end()) return it->second.content;
  return req.has_param(key) ? req.get_param_value(key) : std::string();
}

}  // namespace

struct Service::Impl {
  Model model;
  std::shared_ptr<DatasetStore> store;
  ServiceConfig config;
  json manifest;
  httplib::Server server;
  std::thread thread;
  bool bound = false;

  Impl(Model m, std::shared_ptr<DatasetStore> s, ServiceConfig c, json man)
      : model(std::move(m)), store(std::move(s)), config(std::move(c)), manifest(std::move(man)) {
    if (manifest.is_null()) manifest = manifest_to_json(describe_model(model));
    routes();
  }

  bool need_store(httplib::Response& res) const {
    if (store) return true;
    send_error(res, 503, "no dataset is configured for this service");
    return false;
  }

  void routes() {
    // leave room for multipart framing around a maximal image
    server.set_payload_max_length(config.max_upload_bytes * 2 + (1u << 20));

    server.set_post_routing_handler([this](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Origin", config.cors_origin);
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
    });
    server.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    // httplib's own rejections (404, oversize body, bad framing) get JSON too
    server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty()) send_error(res, res.status, httplib::status_message(res.status));
      return httplib::Server::HandlerResponse::Handled;
    });
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        send_error(res, 500, e.what());
      } catch (...) {
        send_error(res, 500, "internal error");
      }
    });

    server.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, {{"status", "ok"}, {"model_id", model.model_id()}, {"dataset", store != nullptr}});
    });

    server.Get("/v1/model", [this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, {{"model_id", model.model_id()}, {"folded", model.folded()}, {"manifest", manifest}});
    });

    server.Post("/v1/classify", [this](const httplib::Request& req, httplib::Response& res) {
      const auto* part = image_part(req, res, config.max_upload_bytes);
      if (!part) return;
      try {
        const Prediction p = classify_bytes(model, as_bytes(part->content));
        send_json(res, 200, classify_response(model, p, config.label_notes));
      } catch (const DecodeError& e) {
        send_error(res, 400, e.what());
      }
    });

    server.Post("/v1/items", [this](const httplib::Request& req, httplib::Response& res) {
      if (!need_store(res)) return;
      const auto* part = image_part(req, res, config.max_upload_bytes);
      if (!part) return;
      try {
        const auto added = store->add_item(part->content, form_value(req, "label"), form_value(req, "metadata"),
                                           ItemSource::kUserContributed);
        send_json(res, added.created ? 201 : 200,
                  {{"id", added.item.id}, {"created", added.created}, {"item", item_to_json(added.item)}});
      } catch (const InvalidArgument& e) {
        send_error(res, 400, e.what());
      } catch (const DecodeError& e) {
        send_error(res, 400, e.what());
      } catch (const ConflictError& e) {
        send_error(res, 409, e.what());
      }
    });

    server.Get("/v1/items", [this](const httplib::Request& req, httplib::Response& res) {
      if (!need_store(res)) return;
      std::map<std::string, std::string> query;
      for (const auto& [k, v] : req.params) query[k] = v;
      ItemFilter filter;
      try {
        filter = ItemFilter::parse(query);
      } catch (const InvalidArgument& e) {
        send_error(res, 400, e.what());
        return;
      }
      json items = json::array();
      for (const auto& item : store->list(filter)) items.push_back(item_to_json(item));
      const std::size_t count = items.size();
      send_json(res, 200, {{"items", std::move(items)}, {"count", count}});
    });

    server.Get("/v1/stats", [this](const httplib::Request&, httplib::Response& res) {
      if (!need_store(res)) return;
      send_json(res, 200, stats_to_json(store->stats()));
    });
  }
};

Service::Service(Model model, std::shared_ptr<DatasetStore> store, ServiceConfig config, json manifest)
    : impl_(std::make_unique<Impl>(std::move(model), std::move(store), std::move(config), std::move(manifest))) {}

Service::~Service() { stop(); }

int Service::bind() {
  auto& cfg = impl_->config;
  int port = cfg.port;
  if (port == 0) {
    port = impl_->server.bind_to_any_port(cfg.host);
  } else if (!impl_->server.bind_to_port(cfg.host, port)) {
    port = -1;
  }
  if (port < 0) throw IoError("cannot listen on " + cfg.host + ":" + std::to_string(cfg.port));
  impl_->bound = true;
  return port;
}

void Service::run() {
  if (!impl_->bound) throw InvalidArgument("Service::run before bind");
  impl_->server.listen_after_bind();
}

int Service::start() {
  const int port = bind();
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return port;
}

void Service::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace deepwaste
