#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include "deepwaste/imaging.hpp"
#include "json.hpp"

namespace deepwaste {

inline constexpr std::string_view kDatasetMagic = "DWDATA";
inline constexpr int kDatasetFormatVersion = 1;
inline constexpr std::string_view kDatasetManifestName = "dataset.json";

enum class WasteCategory { kTrash = 0, kRecycle = 1, kCompost = 2 };
inline constexpr std::size_t kNumCategories = 3;

// Class order used by models and reports.
const std::vector<std::string>& category_labels();
std::string_view category_name(WasteCategory c);
// Throws InvalidArgument listing the valid labels.
WasteCategory parse_category(std::string_view label);

enum class ItemSource { kBundled, kUserContributed };
std::string_view source_name(ItemSource s);
ItemSource parse_source(std::string_view s);

enum class Split { kTrain, kVal, kTest, kUnassigned };
std::string_view split_name(Split s);
Split parse_split(std::string_view s);

struct DatasetItem {
  std::string id;     // SHA-256 of the image bytes
  std::string image;  // path relative to the store root
  WasteCategory label = WasteCategory::kTrash;
  std::string metadata;
  ItemSource source = ItemSource::kBundled;
  Split split = Split::kUnassigned;
  std::int64_t created_at = 0;  // microseconds since the Unix epoch

  friend bool operator==(const DatasetItem&, const DatasetItem&) = default;
};

struct SplitRatios {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

struct DatasetManifest {
  int format_version = kDatasetFormatVersion;
  std::vector<std::string> labels = category_labels();
  std::vector<DatasetItem> items;
  // Set by the last assign_splits.
  std::optional<std::uint64_t> split_seed;
  std::optional<SplitRatios> split_ratios;
};

nlohmann::json dataset_to_json(const DatasetManifest& manifest);
// Throws FormatError.
DatasetManifest dataset_from_json(const nlohmann::json& doc);

struct DatasetStats {
  std::array<std::size_t, kNumCategories> per_class{};
  std::size_t total = 0;
};
DatasetStats stats(const DatasetManifest& manifest);

// Stratified: each class is shuffled by the seed and cut by the ratios with
// largest-remainder rounding. Throws InvalidArgument for bad ratios or a class
// too small to fill every non-empty split.
DatasetManifest assign_splits(DatasetManifest manifest, SplitRatios ratios, std::uint64_t seed);

struct ItemFilter {
  std::optional<WasteCategory> label;
  std::optional<Split> split;
  std::optional<ItemSource> source;

  // Keys label, split, source; empty values are ignored. Throws
  // InvalidArgument on any other key or a bad value.
  static ItemFilter parse(const std::map<std::string, std::string>& query);
};

// Ordered by created_at, then id.
std::vector<DatasetItem> list_items(const DatasetManifest& manifest, const ItemFilter& filter = {});

struct AddResult {
  DatasetItem item;
  bool created = false;
};

// Content-addressed image store with a JSON manifest. Images live at
// images/<first two hex digits>/<hash>.<ext>. One writer at a time; readers
// get consistent snapshots.
class DatasetStore {
 public:
  // Creates the directory and an empty manifest if needed.
  explicit DatasetStore(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  DatasetManifest snapshot() const;
  std::optional<DatasetItem> get(std::string_view id) const;

  // Throws DecodeError for undecodable bytes, InvalidArgument for an unknown
  // label, ConflictError when the same bytes are stored under another label.
  AddResult add_item(std::span<const std::uint8_t> bytes, std::string_view label, std::string metadata,
                     ItemSource source);
  AddResult add_item(std::string_view bytes, std::string_view label, std::string metadata, ItemSource source);

  DatasetStats stats() const;
  DatasetManifest assign_splits(SplitRatios ratios, std::uint64_t seed);
  std::vector<DatasetItem> list(const ItemFilter& filter = {}) const;

  std::filesystem::path image_path(const DatasetItem& item) const { return root_ / item.image; }
  std::string read_image_bytes(const DatasetItem& item) const;
  ImageRGB8 load_image(const DatasetItem& item) const;

  // Single ustar archive holding the manifest and every image.
  void export_archive(const std::filesystem::path& archive) const;
  // Merges an exported archive; items already present keep their record.
  // Returns the number of items added.
  std::size_t import_archive(const std::filesystem::path& archive);

 private:
  void write_manifest_locked() const;
  AddResult add_locked(std::span<const std::uint8_t> bytes, WasteCategory label, std::string metadata,
                       ItemSource source, std::optional<Split> split, std::optional<std::int64_t> created_at);

  std::filesystem::path root_;
  mutable std::shared_mutex mutex_;
  DatasetManifest manifest_;
  std::int64_t last_created_ = 0;
};

// Minimal ustar reader/writer: regular files only.
struct TarEntry {
  std::string name;
  std::string data;
};
std::string write_tar(const std::vector<TarEntry>& entries);
// Throws FormatError on a damaged archive.
std::vector<TarEntry> read_tar(std::string_view archive);

// Procedural three-class images: trash = filled circle, recycle = square
// outline, compost = triangle, each on a noisy background with a randomized
// position, size and tint. Image i has label i % 3.
struct SyntheticImage {
  ImageRGB8 image;
  WasteCategory label;
};
std::vector<SyntheticImage> make_synthetic_shapes(std::size_t count, std::uint64_t seed, std::size_t size = 64);

}  // namespace deepwaste
