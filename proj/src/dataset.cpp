#include "deepwaste/dataset.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <mutex>
#include <numeric>
#include <set>

#include "deepwaste/errors.hpp"
#include "deepwaste/file_util.hpp"
#include "deepwaste/hashing.hpp"
#include "deepwaste/random.hpp"

namespace deepwaste {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& category_labels() {
  static const std::vector<std::string> labels{"trash", "recycle", "compost"};
  return labels;
}

std::string_view category_name(WasteCategory c) { return category_labels().at(static_cast<std::size_t>(c)); }

WasteCategory parse_category(std::string_view label) {
  const auto& labels = category_labels();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == label) return static_cast<WasteCategory>(i);
  }
  throw InvalidArgument("unknown label '" + std::string(label) + "' (valid labels: trash, recycle, compost)");
}

std::string_view source_name(ItemSource s) { return s == ItemSource::kBundled ? "bundled" : "user_contributed"; }

ItemSource parse_source(std::string_view s) {
  if (s == "bundled") return ItemSource::kBundled;
  if (s == "user_contributed") return ItemSource::kUserContributed;
  throw InvalidArgument("unknown source '" + std::string(s) + "' (valid: bundled, user_contributed)");
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
    case Split::kUnassigned: break;
  }
  return "unassigned";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  if (s == "unassigned") return Split::kUnassigned;
  throw InvalidArgument("unknown split '" + std::string(s) + "' (valid: train, val, test, unassigned)");
}

json dataset_to_json(const DatasetManifest& manifest) {
  json items = json::array();
  for (const auto& item : manifest.items) {
    items.push_back({{"id", item.id},
                     {"image", item.image},
                     {"label", category_name(item.label)},
                     {"metadata", item.metadata},
                     {"source", source_name(item.source)},
                     {"split", split_name(item.split)},
                     {"created_at", item.created_at}});
  }
  json doc{{"magic", kDatasetMagic},
           {"format_version", manifest.format_version},
           {"labels", manifest.labels},
           {"items", std::move(items)}};
  if (manifest.split_seed) doc["split_seed"] = *manifest.split_seed;
  if (manifest.split_ratios) {
    const auto& r = *manifest.split_ratios;
    doc["split_ratios"] = {{"train", r.train}, {"val", r.val}, {"test", r.test}};
  }
  return doc;
}

DatasetManifest dataset_from_json(const json& doc) {
  try {
    if (!doc.is_object() || doc.value("magic", "") != kDatasetMagic) {
      throw FormatError("dataset manifest: bad magic (expected DWDATA)");
    }
    DatasetManifest m;
    m.format_version = doc.at("format_version").get<int>();
    if (m.format_version != kDatasetFormatVersion) {
      throw FormatError("dataset manifest: unsupported format_version " + std::to_string(m.format_version));
    }
    m.labels = doc.at("labels").get<std::vector<std::string>>();
    if (m.labels != category_labels()) throw FormatError("dataset manifest: unexpected label set");
    std::set<std::string> seen;
    for (const auto& it : doc.at("items")) {
      DatasetItem item;
      item.id = it.at("id").get<std::string>();
      item.image = it.at("image").get<std::string>();
      item.label = parse_category(it.at("label").get<std::string>());
      item.metadata = it.value("metadata", "");
      item.source = parse_source(it.at("source").get<std::string>());
      item.split = parse_split(it.at("split").get<std::string>());
      item.created_at = it.at("created_at").get<std::int64_t>();
      if (!seen.insert(item.id).second) throw FormatError("dataset manifest: duplicate item id " + item.id);
      m.items.push_back(std::move(item));
    }
    if (doc.contains("split_seed")) m.split_seed = doc["split_seed"].get<std::uint64_t>();
    if (doc.contains("split_ratios")) {
      const auto& r = doc["split_ratios"];
      m.split_ratios = SplitRatios{r.at("train").get<double>(), r.at("val").get<double>(), r.at("test").get<double>()};
    }
    return m;
  } catch (const json::exception& e) {
    throw FormatError(std::string("dataset manifest: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("dataset manifest: ") + e.what());
  }
}

DatasetStats stats(const DatasetManifest& manifest) {
  DatasetStats s;
  for (const auto& item : manifest.items) ++s.per_class[static_cast<std::size_t>(item.label)];
  s.total = manifest.items.size();
  return s;
}

namespace {

// Largest remainder; ties go to the earlier part.
std::array<std::size_t, 3> apportion(std::size_t n, const std::array<double, 3>& ratios) {
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> rem{};
  std::size_t used = 0;
  for (int i = 0; i < 3; ++i) {
    const double quota = static_cast<double>(n) * ratios[i];
    counts[i] = static_cast<std::size_t>(std::floor(quota));
    rem[i] = quota - static_cast<double>(counts[i]);
    used += counts[i];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; used < n; ++k, ++used) ++counts[order[k % 3]];
  return counts;
}

}  // namespace

DatasetManifest assign_splits(DatasetManifest manifest, SplitRatios ratios, std::uint64_t seed) {
  const std::array<double, 3> r{ratios.train, ratios.val, ratios.test};
  for (double v : r) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidArgument("split ratios must be non-negative");
  }
  if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9) throw InvalidArgument("split ratios must sum to 1");
  const auto parts = static_cast<std::size_t>(std::count_if(r.begin(), r.end(), [](double v) { return v > 0.0; }));

  constexpr Split kSplits[3] = {Split::kTrain, Split::kVal, Split::kTest};
  for (std::size_t c = 0; c < kNumCategories; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < manifest.items.size(); ++i) {
      if (static_cast<std::size_t>(manifest.items[i].label) == c) idx.push_back(i);
    }
    if (idx.empty()) continue;
    if (idx.size() < parts) {
      throw InvalidArgument("class '" + std::string(category_name(static_cast<WasteCategory>(c))) + "' has " +
                            std::to_string(idx.size()) + " items, fewer than the " + std::to_string(parts) +
                            " requested splits");
    }
    // independent of manifest order
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return manifest.items[a].id < manifest.items[b].id;
    });
    Rng rng = Rng::derive(seed, c);
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    const auto counts = apportion(idx.size(), r);
    std::size_t pos = 0;
    for (int s = 0; s < 3; ++s) {
      for (std::size_t k = 0; k < counts[s]; ++k) manifest.items[idx[pos++]].split = kSplits[s];
    }
  }
  manifest.split_seed = seed;
  manifest.split_ratios = ratios;
  return manifest;
}

ItemFilter ItemFilter::parse(const std::map<std::string, std::string>& query) {
  ItemFilter f;
  for (const auto& [key, value] : query) {
    if (key == "label") {
      if (!value.empty()) f.label = parse_category(value);
    } else if (key == "split") {
      if (!value.empty()) f.split = parse_split(value);
    } else if (key == "source") {
      if (!value.empty()) f.source = parse_source(value);
    } else {
      throw InvalidArgument("unknown filter key '" + key + "' (valid: label, split, source)");
    }
  }
  return f;
}

std::vector<DatasetItem> list_items(const DatasetManifest& manifest, const ItemFilter& filter) {
  std::vector<DatasetItem> out;
  for (const auto& item : manifest.items) {
    if (filter.label && item.label != *filter.label) continue;
    if (filter.split && item.split != *filter.split) continue;
    if (filter.source && item.source != *filter.source) continue;
    out.push_back(item);
  }
  std::sort(out.begin(), out.end(), [](const DatasetItem& a, const DatasetItem& b) {
    return std::tie(a.created_at, a.id) < std::tie(b.created_at, b.id);
  });
  return out;
}

DatasetStore::DatasetStore(fs::path root) : root_(std::move(root)) {
  std::error_code ec;
  fs::create_directories(root_ / "images", ec);
  if (ec) throw IoError("cannot create dataset directory " + root_.string() + ": " + ec.message());
  const fs::path manifest_path = root_ / kDatasetManifestName;
  if (!fs::exists(manifest_path)) {
    write_manifest_locked();
    return;
  }
  json doc;
  try {
    doc = json::parse(read_file(manifest_path));
  } catch (const json::parse_error& e) {
    throw FormatError("dataset manifest is not valid JSON: " + std::string(e.what()));
  }
  manifest_ = dataset_from_json(doc);
  for (const auto& item : manifest_.items) {
    if (!fs::is_regular_file(root_ / item.image)) {
      throw ValidationError("dataset item " + item.id + " references missing file " + item.image);
    }
    last_created_ = std::max(last_created_, item.created_at);
  }
}

void DatasetStore::write_manifest_locked() const {
  write_file_atomic(root_ / kDatasetManifestName, dataset_to_json(manifest_).dump(1) + "\n");
}

DatasetManifest DatasetStore::snapshot() const {
  std::shared_lock lock(mutex_);
  return manifest_;
}

std::optional<DatasetItem> DatasetStore::get(std::string_view id) const {
  std::shared_lock lock(mutex_);
  for (const auto& item : manifest_.items) {
    if (item.id == id) return item;
  }
  return std::nullopt;
}

AddResult DatasetStore::add_locked(std::span<const std::uint8_t> bytes, WasteCategory label, std::string metadata,
                                   ItemSource source, std::optional<Split> split,
                                   std::optional<std::int64_t> created_at) {
  const std::string id = sha256_hex(bytes);
  for (const auto& item : manifest_.items) {
    if (item.id != id) continue;
    if (item.label != label) {
      throw ConflictError("image " + id + " is already stored with label '" + std::string(category_name(item.label)) +
                          "'");
    }
    return {item, false};
  }
  const auto format = sniff_format(bytes);
  if (!format) throw DecodeError("unrecognized image data (expected PNG or JPEG)");
  decode(bytes, *format);

  DatasetItem item;
  item.id = id;
  item.image = "images/" + id.substr(0, 2) + "/" + id + (*format == ImageFormat::kPng ? ".png" : ".jpg");
  item.label = label;
  item.metadata = std::move(metadata);
  item.source = source;
  item.split = split.value_or(Split::kUnassigned);
  if (created_at) {
    item.created_at = *created_at;
  } else {
    const auto now = std::chrono::duration_cast<std::chrono::microseconds>(
                         std::chrono::system_clock::now().time_since_epoch())
                         .count();
    item.created_at = std::max<std::int64_t>(now, last_created_ + 1);
  }
  last_created_ = std::max(last_created_, item.created_at);

  const fs::path path = root_ / item.image;
  fs::create_directories(path.parent_path());
  if (!fs::exists(path)) {
    write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  }
  manifest_.items.push_back(item);
  try {
    write_manifest_locked();
  } catch (...) {
    manifest_.items.pop_back();
    throw;
  }
  return {std::move(item), true};
}

AddResult DatasetStore::add_item(std::span<const std::uint8_t> bytes, std::string_view label, std::string metadata,
                                 ItemSource source) {
  const WasteCategory category = parse_category(label);
  std::unique_lock lock(mutex_);
  return add_locked(bytes, category, std::move(metadata), source, std::nullopt, std::nullopt);
}

AddResult DatasetStore::add_item(std::string_view bytes, std::string_view label, std::string metadata,
                                 ItemSource source) {
  return add_item(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()),
                  label, std::move(metadata), source);
}

DatasetStats DatasetStore::stats() const {
  std::shared_lock lock(mutex_);
  return deepwaste::stats(manifest_);
}

DatasetManifest DatasetStore::assign_splits(SplitRatios ratios, std::uint64_t seed) {
  std::unique_lock lock(mutex_);
  DatasetManifest next = deepwaste::assign_splits(manifest_, ratios, seed);
  std::swap(manifest_, next);
  try {
    write_manifest_locked();
  } catch (...) {
    std::swap(manifest_, next);
    throw;
  }
  return manifest_;
}

std::vector<DatasetItem> DatasetStore::list(const ItemFilter& filter) const {
  std::shared_lock lock(mutex_);
  return list_items(manifest_, filter);
}

std::string DatasetStore::read_image_bytes(const DatasetItem& item) const { return read_file(image_path(item)); }

ImageRGB8 DatasetStore::load_image(const DatasetItem& item) const {
  try {
    return decode(read_image_bytes(item));
  } catch (const Error& e) {
    throw DecodeError("dataset item " + item.id + ": " + e.what());
  }
}

void DatasetStore::export_archive(const fs::path& archive) const {
  const DatasetManifest m = snapshot();
  std::vector<TarEntry> entries;
  entries.push_back({std::string(kDatasetManifestName), dataset_to_json(m).dump(1) + "\n"});
  for (const auto& item : m.items) entries.push_back({item.image, read_image_bytes(item)});
  write_file_atomic(archive, write_tar(entries));
}

std::size_t DatasetStore::import_archive(const fs::path& archive) {
  const auto entries = read_tar(read_file(archive));
  std::map<std::string, const std::string*> files;
  for (const auto& e : entries) files[e.name] = &e.data;
  const auto mit = files.find(std::string(kDatasetManifestName));
  if (mit == files.end()) throw FormatError("archive has no " + std::string(kDatasetManifestName));
  json doc;
  try {
    doc = json::parse(*mit->second);
  } catch (const json::parse_error& e) {
    throw FormatError("archived dataset manifest is not valid JSON: " + std::string(e.what()));
  }
  const DatasetManifest incoming = dataset_from_json(doc);

  std::unique_lock lock(mutex_);
  std::size_t added = 0;
  for (const auto& item : incoming.items) {
    const auto fit = files.find(item.image);
    if (fit == files.end()) throw FormatError("archive is missing " + item.image + " for item " + item.id);
    const auto& data = *fit->second;
    const std::span<const std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(data.data()), data.size());
    if (sha256_hex(bytes) != item.id) throw ValidationError("archived image " + item.image + " does not match its id");
    if (add_locked(bytes, item.label, item.metadata, item.source, item.split, item.created_at).created) ++added;
  }
  return added;
}

namespace {

constexpr std::size_t kBlock = 512;

void put_octal(char* field, std::size_t width, std::uint64_t value) {
  // width - 1 digits and a NUL
  for (std::size_t i = width - 1; i-- > 0;) {
    field[i] = static_cast<char>('0' + (value & 7));
    value >>= 3;
  }
  field[width - 1] = '\0';
}

std::uint64_t get_octal(const char* field, std::size_t width) {
  std::uint64_t v = 0;
  std::size_t i = 0;
  while (i < width && field[i] == ' ') ++i;
  for (; i < width && field[i] >= '0' && field[i] <= '7'; ++i) v = v * 8 + static_cast<std::uint64_t>(field[i] - '0');
  return v;
}

unsigned header_checksum(const char* h) {
  unsigned sum = 0;
  for (std::size_t i = 0; i < kBlock; ++i) {
    sum += (i >= 148 && i < 156) ? ' ' : static_cast<unsigned char>(h[i]);
  }
  return sum;
}

}  // namespace

std::string write_tar(const std::vector<TarEntry>& entries) {
  std::string out;
  for (const auto& e : entries) {
    if (e.name.empty() || e.name.size() >= 100) throw InvalidArgument("tar entry name too long: " + e.name);
    char h[kBlock] = {};
    std::copy(e.name.begin(), e.name.end(), h);
    put_octal(h + 100, 8, 0644);
    put_octal(h + 108, 8, 0);
    put_octal(h + 116, 8, 0);
    put_octal(h + 124, 12, e.data.size());
    put_octal(h + 136, 12, 0);
    h[156] = '0';
    std::copy_n("ustar", 6, h + 257);
    h[263] = '0';
    h[264] = '0';
    put_octal(h + 148, 7, header_checksum(h));
    h[155] = ' ';
    out.append(h, kBlock);
    out += e.data;
    out.append((kBlock - e.data.size() % kBlock) % kBlock, '\0');
  }
  out.append(2 * kBlock, '\0');
  return out;
}

std::vector<TarEntry> read_tar(std::string_view archive) {
  std::vector<TarEntry> entries;
  std::size_t pos = 0;
  while (true) {
    if (pos + kBlock > archive.size()) throw FormatError("tar: truncated archive");
    const char* h = archive.data() + pos;
    if (std::all_of(h, h + kBlock, [](char c) { return c == '\0'; })) return entries;
    if (get_octal(h + 148, 8) != header_checksum(h)) throw FormatError("tar: header checksum mismatch");
    const std::uint64_t size = get_octal(h + 124, 12);
    pos += kBlock;
    if (size > archive.size() - pos) throw FormatError("tar: truncated archive");
    const char type = h[156];
    if (type == '0' || type == '\0') {
      std::string name(h, strnlen(h, 100));
      if (std::string_view(h + 257, 5) == "ustar" && h[345] != '\0') {
        name = std::string(h + 345, strnlen(h + 345, 155)) + "/" + name;
      }
      entries.push_back({std::move(name), std::string(archive.substr(pos, size))});
    }
    pos += (size + kBlock - 1) / kBlock * kBlock;
  }
}

namespace {

std::uint8_t clamp_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace

std::vector<SyntheticImage> make_synthetic_shapes(std::size_t count, std::uint64_t seed, std::size_t size) {
  if (size < 16) throw InvalidArgument("synthetic images need a side of at least 16 pixels");
  std::vector<SyntheticImage> out;
  out.reserve(count);
  const double s = static_cast<double>(size);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = Rng::derive(seed, i);
    const auto label = static_cast<WasteCategory>(i % kNumCategories);
    ImageRGB8 img(size, size);
    const double bg = rng.uniform(60, 190);
    std::array<double, 3> tint{};
    for (auto& t : tint) t = rng.uniform(0, 255);
    const double radius = rng.uniform(0.2, 0.35) * s;
    const double cx = rng.uniform(radius, s - radius), cy = rng.uniform(radius, s - radius);
    const double thickness = std::max(2.0, 0.08 * s);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
        bool inside = false;
        switch (label) {
          case WasteCategory::kTrash:
            inside = dx * dx + dy * dy <= radius * radius;
            break;
          case WasteCategory::kRecycle: {
            const double m = std::max(std::abs(dx), std::abs(dy));
            inside = m <= radius && m >= radius - thickness;
            break;
          }
          case WasteCategory::kCompost:
            // apex up, base at dy = radius
            inside = dy <= radius && dy >= -radius && std::abs(dx) <= (dy + radius) * 0.5;
            break;
        }
        for (std::size_t c = 0; c < 3; ++c) {
          const double noise = rng.uniform(-12, 12);
          img.at(x, y, c) = clamp_u8((inside ? tint[c] : bg) + noise);
        }
      }
    }
    out.push_back({std::move(img), label});
  }
  return out;
}

}  // namespace deepwaste
