#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>

#include "deepwaste/dataset.hpp"
#include "deepwaste/model.hpp"
#include "json.hpp"

namespace deepwaste {

inline constexpr std::size_t kMaxUploadBytes = 10u << 20;

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::string cors_origin = "*";
  std::size_t max_upload_bytes = kMaxUploadBytes;
  // Optional text shown next to a label, e.g. local disposal caveats.
  std::map<std::string, std::string> label_notes;
};

// {"predictions": [{"label", "confidence"}...] sorted by confidence
// descending, "label": top-1, "model_id", "latency_ms"} plus "note" when the
// top label has one. The CLI and the service both print this.
nlohmann::json classify_response(const Model& model, const Prediction& prediction,
                                 const std::map<std::string, std::string>& label_notes = {});

// Decode, preprocess and forward. Throws DecodeError for bad bytes.
Prediction classify_bytes(const Model& model, std::span<const std::uint8_t> bytes);

nlohmann::json item_to_json(const DatasetItem& item);
nlohmann::json stats_to_json(const DatasetStats& stats);

// Local HTTP front end for a model and, optionally, a dataset store. All
// inference runs in-process; the service never opens outbound connections.
//
//   GET  /v1/health
//   POST /v1/classify   multipart field "image"
//   POST /v1/items      multipart "image", "label", optional "metadata"
//   GET  /v1/items      ?label=&split=&source=
//   GET  /v1/stats
//   GET  /v1/model      manifest without weights
class Service {
 public:
  // `store` may be null; dataset endpoints then answer 503. `manifest` is
  // what /v1/model echoes; when null the model describes itself.
  Service(Model model, std::shared_ptr<DatasetStore> store, ServiceConfig config,
          nlohmann::json manifest = nullptr);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Binds the listening socket and returns the port. Throws IoError.
  int bind();
  // Serves until stop(); bind() must have succeeded.
  void run();
  // bind() and run() on a background thread; returns the port.
  int start();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace deepwaste
