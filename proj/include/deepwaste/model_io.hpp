#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "deepwaste/model.hpp"
#include "json.hpp"

namespace deepwaste {

inline constexpr std::string_view kModelMagic = "DWMODEL";
inline constexpr int kModelFormatVersion = 1;
inline constexpr std::string_view kManifestFileName = "model.json";
inline constexpr std::string_view kBlobFileName = "model.bin";

struct TensorEntry {
  std::string name;
  std::string dtype = "f32";
  Shape shape;
  std::uint64_t offset = 0;  // bytes from the start of the blob
  std::uint64_t length = 0;  // bytes
};

struct ModelManifest {
  int format_version = kModelFormatVersion;
  std::string architecture;
  InputSpec input;
  std::vector<std::string> labels;
  std::vector<TensorEntry> tensors;
  // SHA-256 of the blob, so the manifest hash also pins the weights.
  std::string blob_sha256;
  // Only present for the "custom" architecture.
  std::optional<ModelGraph> graph;
};

nlohmann::json manifest_to_json(const ModelManifest& manifest);
// Throws FormatError on bad magic, version or structure.
ModelManifest manifest_from_json(const nlohmann::json& doc);

nlohmann::json graph_to_json(const ModelGraph& graph);
ModelGraph graph_from_json(const nlohmann::json& doc);

// Manifest describing how `model` is laid out on disk (tensors in graph order,
// packed back to back). Folded models are written as "custom".
ModelManifest describe_model(const Model& model);
std::string manifest_text(const ModelManifest& manifest);

// Writes manifest + little-endian f32 blob. Throws ValidationError naming the
// node if a parameter tensor is missing, IoError on write failure.
void save_model(const ModelGraph& graph, const WeightMap& weights, const ModelManifest& meta,
                const std::filesystem::path& manifest_path, const std::filesystem::path& blob_path);
void save_model(const Model& model, const std::filesystem::path& manifest_path,
                const std::filesystem::path& blob_path);
void save_model_dir(const Model& model, const std::filesystem::path& dir);

// Validates everything before returning; on failure nothing is returned.
Model load_model(const std::filesystem::path& manifest_path, const std::filesystem::path& blob_path,
                 bool fold_bn);
Model load_model_dir(const std::filesystem::path& dir, bool fold_bn);

}  // namespace deepwaste
