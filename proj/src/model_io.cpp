#include "deepwaste/model_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <set>

#include "deepwaste/errors.hpp"
#include "deepwaste/file_util.hpp"
#include "deepwaste/hashing.hpp"

namespace deepwaste {

using nlohmann::json;

namespace {

json extent_json(Extent2 e) { return json::array({e.h, e.w}); }

Extent2 extent_from(const json& j) {
  if (!j.is_array() || j.size() != 2) throw FormatError("expected [h, w] pair");
  return {j[0].get<std::size_t>(), j[1].get<std::size_t>()};
}

json attrs_json(const Node& node) {
  return std::visit(
      [](const auto& a) -> json {
        using T = std::decay_t<decltype(a)>;
        if constexpr (std::is_same_v<T, ConvAttrs>) {
          return {{"in_channels", a.in_channels}, {"out_channels", a.out_channels},
                  {"kernel", extent_json(a.kernel)}, {"stride", extent_json(a.stride)},
                  {"padding", extent_json(a.padding)}, {"dilation", extent_json(a.dilation)},
                  {"groups", a.groups}, {"bias", a.has_bias}};
        } else if constexpr (std::is_same_v<T, BatchNormAttrs>) {
          return {{"channels", a.channels}, {"eps", a.eps}};
        } else if constexpr (std::is_same_v<T, PoolParams>) {
          return {{"mode", a.mode == PoolMode::kMax ? "max" : "avg"}, {"kernel", extent_json(a.kernel)},
                  {"stride", extent_json(a.stride)}, {"padding", extent_json(a.padding)}};
        } else if constexpr (std::is_same_v<T, FcAttrs>) {
          return {{"in_features", a.in_features}, {"out_features", a.out_features}};
        } else {
          return json::object();
        }
      },
      node.attrs);
}

NodeAttrs attrs_from(OpKind kind, const json& j) {
  switch (kind) {
    case OpKind::kConv:
    case OpKind::kDepthwiseConv: {
      ConvAttrs a;
      a.in_channels = j.at("in_channels").get<std::size_t>();
      a.out_channels = j.at("out_channels").get<std::size_t>();
      a.kernel = extent_from(j.at("kernel"));
      a.stride = extent_from(j.at("stride"));
      a.padding = extent_from(j.at("padding"));
      a.dilation = j.contains("dilation") ? extent_from(j["dilation"]) : Extent2{1, 1};
      a.groups = j.value("groups", std::size_t{1});
      a.has_bias = j.value("bias", false);
      return a;
    }
    case OpKind::kBatchNorm:
      return BatchNormAttrs{j.at("channels").get<std::size_t>(), j.value("eps", 1e-5f)};
    case OpKind::kPool: {
      PoolParams p;
      const std::string mode = j.at("mode").get<std::string>();
      if (mode != "max" && mode != "avg") throw FormatError("pool mode must be max or avg");
      p.mode = mode == "max" ? PoolMode::kMax : PoolMode::kAvg;
      p.kernel = extent_from(j.at("kernel"));
      p.stride = extent_from(j.at("stride"));
      p.padding = extent_from(j.at("padding"));
      return p;
    }
    case OpKind::kFullyConnected:
      return FcAttrs{j.at("in_features").get<std::size_t>(), j.at("out_features").get<std::size_t>()};
    default:
      return std::monostate{};
  }
}

ModelGraph builder_graph(const std::string& architecture, std::size_t classes) {
  if (architecture == kArchResNet50) return build_resnet50(classes);
  if (architecture == kArchMobileNetV1) return build_mobilenet_v1(classes);
  throw FormatError("unknown architecture '" + architecture + "'");
}

void write_f32_le(std::ostream& out, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (float v : values) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      const char bytes[4] = {static_cast<char>(bits), static_cast<char>(bits >> 8), static_cast<char>(bits >> 16),
                             static_cast<char>(bits >> 24)};
      out.write(bytes, 4);
    }
  }
}

std::vector<float> read_f32_le(std::string_view blob, std::uint64_t offset, std::size_t count) {
  std::vector<float> out(count);
  const auto* src = reinterpret_cast<const unsigned char*>(blob.data() + offset);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t bits = static_cast<std::uint32_t>(src[4 * i]) |
                               (static_cast<std::uint32_t>(src[4 * i + 1]) << 8) |
                               (static_cast<std::uint32_t>(src[4 * i + 2]) << 16) |
                               (static_cast<std::uint32_t>(src[4 * i + 3]) << 24);
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

}  // namespace

json graph_to_json(const ModelGraph& graph) {
  json nodes = json::array();
  for (const Node& node : graph.nodes) {
    nodes.push_back({{"id", node.id}, {"op", op_kind_name(node.kind)}, {"inputs", node.inputs},
                     {"attrs", attrs_json(node)}});
  }
  return {{"nodes", nodes}, {"output", graph.output}, {"feature_tap", graph.feature_tap}};
}

ModelGraph graph_from_json(const json& doc) {
  try {
    ModelGraph graph;
    for (const json& n : doc.at("nodes")) {
      Node node;
      node.id = n.at("id").get<std::string>();
      node.kind = parse_op_kind(n.at("op").get<std::string>());
      node.inputs = n.at("inputs").get<std::vector<std::string>>();
      node.attrs = attrs_from(node.kind, n.value("attrs", json::object()));
      graph.nodes.push_back(std::move(node));
    }
    graph.output = doc.at("output").get<std::string>();
    graph.feature_tap = doc.at("feature_tap").get<std::string>();
    return graph;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed graph: ") + e.what());
  }
}

json manifest_to_json(const ModelManifest& m) {
  json tensors = json::array();
  for (const TensorEntry& t : m.tensors) {
    tensors.push_back({{"name", t.name}, {"dtype", t.dtype}, {"shape", t.shape}, {"offset", t.offset},
                       {"length", t.length}});
  }
  json doc = {
      {"magic", kModelMagic},
      {"format_version", m.format_version},
      {"architecture", m.architecture},
      {"input",
       {{"height", m.input.height},
        {"width", m.input.width},
        {"channels", m.input.channels},
        {"mean", m.input.mean},
        {"std", m.input.std}}},
      {"labels", m.labels},
      {"tensors", tensors},
  };
  if (!m.blob_sha256.empty()) doc["blob_sha256"] = m.blob_sha256;
  if (m.graph) doc["graph"] = graph_to_json(*m.graph);
  return doc;
}

ModelManifest manifest_from_json(const json& doc) {
  if (!doc.is_object() || doc.value("magic", std::string()) != kModelMagic) {
    throw FormatError("not a model manifest (magic must be \"DWMODEL\")");
  }
  ModelManifest m;
  try {
    m.format_version = doc.at("format_version").get<int>();
    if (m.format_version != kModelFormatVersion) {
      throw FormatError("unsupported model format_version " + std::to_string(m.format_version));
    }
    m.architecture = doc.at("architecture").get<std::string>();
    const json& in = doc.at("input");
    m.input.height = in.at("height").get<std::size_t>();
    m.input.width = in.at("width").get<std::size_t>();
    m.input.channels = in.at("channels").get<std::size_t>();
    m.input.mean = in.at("mean").get<std::array<float, 3>>();
    m.input.std = in.at("std").get<std::array<float, 3>>();
    m.labels = doc.at("labels").get<std::vector<std::string>>();
    for (const json& t : doc.at("tensors")) {
      TensorEntry e;
      e.name = t.at("name").get<std::string>();
      e.dtype = t.at("dtype").get<std::string>();
      e.shape = t.at("shape").get<Shape>();
      e.offset = t.at("offset").get<std::uint64_t>();
      e.length = t.at("length").get<std::uint64_t>();
      m.tensors.push_back(std::move(e));
    }
    m.blob_sha256 = doc.value("blob_sha256", std::string());
    if (doc.contains("graph")) m.graph = graph_from_json(doc["graph"]);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed model manifest: ") + e.what());
  }
  for (float s : m.input.std) {
    if (!(s > 0.0f)) throw FormatError("input std must be positive");
  }
  return m;
}

std::string manifest_text(const ModelManifest& manifest) { return manifest_to_json(manifest).dump(2) + "\n"; }

namespace {

ModelManifest layout(const ModelGraph& graph, const WeightMap& weights, ModelManifest meta) {
  meta.format_version = kModelFormatVersion;
  meta.tensors.clear();
  std::uint64_t offset = 0;
  for (const ParamSpec& spec : graph.parameters()) {
    auto it = weights.find(spec.name);
    if (it == weights.end()) {
      throw ValidationError("missing tensor '" + spec.name + "' for node '" + spec.node + "'");
    }
    if (it->second.shape() != spec.shape) {
      throw ValidationError("tensor '" + spec.name + "' has shape " + shape_to_string(it->second.shape()) +
                            ", node '" + spec.node + "' needs " + shape_to_string(spec.shape));
    }
    const std::uint64_t length = it->second.numel() * sizeof(float);
    meta.tensors.push_back({spec.name, "f32", spec.shape, offset, length});
    offset += length;
  }
  return meta;
}

std::string pack_blob(const ModelManifest& manifest, const WeightMap& weights) {
  std::ostringstream blob;
  for (const TensorEntry& e : manifest.tensors) write_f32_le(blob, weights.at(e.name).data());
  return std::move(blob).str();
}

}  // namespace

ModelManifest describe_model(const Model& model) {
  ModelManifest meta;
  meta.architecture = model.folded() ? std::string(kArchCustom) : model.architecture();
  meta.input = model.input_spec();
  meta.labels = model.labels();
  if (meta.architecture == kArchCustom) meta.graph = model.graph();
  const WeightMap weights = model.weights();
  meta = layout(model.graph(), weights, std::move(meta));
  meta.blob_sha256 = sha256_hex(pack_blob(meta, weights));
  return meta;
}

void save_model(const ModelGraph& graph, const WeightMap& weights, const ModelManifest& meta,
                const std::filesystem::path& manifest_path, const std::filesystem::path& blob_path) {
  ModelManifest manifest = layout(graph, weights, meta);
  if (manifest.architecture == kArchCustom && !manifest.graph) manifest.graph = graph;

  const std::string blob = pack_blob(manifest, weights);
  manifest.blob_sha256 = sha256_hex(blob);
  write_file_atomic(blob_path, blob);
  write_file_atomic(manifest_path, manifest_text(manifest));
}

void save_model(const Model& model, const std::filesystem::path& manifest_path,
                const std::filesystem::path& blob_path) {
  const ModelManifest meta = describe_model(model);
  save_model(model.graph(), model.weights(), meta, manifest_path, blob_path);
}

void save_model_dir(const Model& model, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  save_model(model, dir / kManifestFileName, dir / kBlobFileName);
}

Model load_model(const std::filesystem::path& manifest_path, const std::filesystem::path& blob_path,
                 bool fold_bn) {
  const std::string text = read_file(manifest_path);
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError("model manifest " + manifest_path.string() + " is not JSON: " + e.what());
  }
  ModelManifest m = manifest_from_json(doc);

  ModelGraph graph;
  if (m.architecture == kArchCustom) {
    if (!m.graph) throw FormatError("custom architecture requires a \"graph\" entry");
    graph = *m.graph;
  } else {
    graph = builder_graph(m.architecture, m.labels.size());
  }

  std::map<std::string, const TensorEntry*> table;
  std::uint64_t needed = 0;
  for (const TensorEntry& e : m.tensors) {
    if (e.dtype != "f32") throw ValidationError("tensor '" + e.name + "' has unsupported dtype " + e.dtype);
    if (e.length != shape_numel(e.shape) * sizeof(float)) {
      throw ValidationError("tensor '" + e.name + "' length does not match its shape");
    }
    if (!table.emplace(e.name, &e).second) throw ValidationError("tensor '" + e.name + "' listed twice");
    needed = std::max(needed, e.offset + e.length);
  }
  std::vector<const TensorEntry*> by_offset;
  for (const auto& [name, e] : table) by_offset.push_back(e);
  std::sort(by_offset.begin(), by_offset.end(),
            [](const TensorEntry* a, const TensorEntry* b) { return a->offset < b->offset; });
  for (std::size_t i = 1; i < by_offset.size(); ++i) {
    if (by_offset[i - 1]->offset + by_offset[i - 1]->length > by_offset[i]->offset) {
      throw ValidationError("tensors '" + by_offset[i - 1]->name + "' and '" + by_offset[i]->name + "' overlap");
    }
  }

  const auto specs = graph.parameters();
  for (const ParamSpec& spec : specs) {
    auto it = table.find(spec.name);
    if (it == table.end()) {
      throw ValidationError("manifest lacks tensor '" + spec.name + "' for node '" + spec.node + "'");
    }
    if (it->second->shape != spec.shape) {
      throw ValidationError("tensor '" + spec.name + "' has shape " + shape_to_string(it->second->shape) +
                            ", architecture needs " + shape_to_string(spec.shape));
    }
  }
  if (table.size() != specs.size()) {
    std::set<std::string> known;
    for (const ParamSpec& spec : specs) known.insert(spec.name);
    for (const auto& [name, e] : table) {
      if (!known.count(name)) throw ValidationError("tensor '" + name + "' does not belong to the architecture");
    }
  }

  std::error_code ec;
  const auto blob_size = std::filesystem::file_size(blob_path, ec);
  if (ec) throw IoError("cannot read " + blob_path.string() + ": " + ec.message());
  if (blob_size < needed) {
    throw TruncationError("weight blob " + blob_path.string() + " has " + std::to_string(blob_size) +
                          " bytes, manifest needs " + std::to_string(needed));
  }
  const std::string blob = read_file(blob_path);

  WeightMap weights;
  for (const ParamSpec& spec : specs) {
    const TensorEntry& e = *table.at(spec.name);
    weights.emplace(spec.name, Tensor(e.shape, read_f32_le(blob, e.offset, shape_numel(e.shape))));
  }
  for (const auto& [name, t] : weights) {
    if (!t.all_finite()) throw ValidationError("tensor '" + name + "' contains NaN or Inf");
  }
  if (!m.blob_sha256.empty() && sha256_hex(blob) != m.blob_sha256) {
    throw ValidationError("weight blob " + blob_path.string() + " does not match the manifest checksum");
  }

  Model model(m.architecture, std::move(graph), weights, m.input, m.labels, sha256_hex(text));
  return fold_bn ? model.with_folded_batchnorm() : model;
}

Model load_model_dir(const std::filesystem::path& dir, bool fold_bn) {
  return load_model(dir / kManifestFileName, dir / kBlobFileName, fold_bn);
}

}  // namespace deepwaste
