// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trialign/binio.hpp"
#include "trialign/error.hpp"
#include "trialign/linalg.hpp"

namespace trialign {

using Rng = std::mt19937_64;
using json = nlohmann::json;

struct Point {
  double x = 0, y = 0, z = 0;
  double r = 0, g = 0, b = 0;
  bool operator==(const Point&) const = default;
};

using PointCloud = std::vector<Point>;

enum class TextSource { raw, caption, retrieved };

inline constexpr std::array<TextSource, 3> kTextSources = {TextSource::raw, TextSource::caption,
                                                           TextSource::retrieved};

inline const char* to_string(TextSource s) {
  switch (s) {
    case TextSource::raw: return "raw";
    case TextSource::caption: return "caption";
    case TextSource::retrieved: return "retrieved";
  }
  return "?";
}

inline TextSource parse_text_source(const std::string& s) {
  for (TextSource t : kTextSources)
    if (s == to_string(t)) return t;
  fail(ErrorCode::parse, "unknown text source category '" + s + "'");
}

inline const std::set<std::string>& dataset_tags() {
  static const std::set<std::string> tags = {"objaverse", "shapenet", "3dfuture", "abo", "synthetic"};
  return tags;
}

struct ShapeRecord {
  std::string id;
  PointCloud points;
  std::map<TextSource, std::vector<std::string>> text_candidates;
  std::vector<std::string> image_view_keys;
  std::string dataset_tag = "synthetic";

  bool has_text() const {
    return std::any_of(text_candidates.begin(), text_candidates.end(),
                       [](const auto& kv) { return !kv.second.empty(); });
  }
  bool operator==(const ShapeRecord&) const = default;
};

// ---------------------------------------------------------------------------
// Embedding cache

/// Frozen text/image encoder outputs, stored as raw float32 so that a cache
/// written by another toolchain loads bit-identically.
class EmbeddingCache {
 public:
  EmbeddingCache() = default;
  EmbeddingCache(std::size_t text_dim, std::size_t image_dim) : text_dim_(text_dim), image_dim_(image_dim) {
    require(text_dim >= 1 && image_dim >= 1, ErrorCode::invalid_argument, "cache dims must be positive");
  }

  std::size_t text_dim() const { return text_dim_; }
  std::size_t image_dim() const { return image_dim_; }

  void add_text(const std::string& key, std::vector<float> v) { add(text_, text_dim_, key, std::move(v), "text"); }
  void add_image(const std::string& key, std::vector<float> v) { add(image_, image_dim_, key, std::move(v), "image"); }

  bool has_text(const std::string& key) const { return text_.count(key) != 0; }
  bool has_image(const std::string& key) const { return image_.count(key) != 0; }

  const std::vector<float>& text_raw(const std::string& key) const { return get(text_, key, "text"); }
  const std::vector<float>& image_raw(const std::string& key) const { return get(image_, key, "image"); }

  Vector text(const std::string& key) const { return widen(text_raw(key)); }
  Vector image(const std::string& key) const { return widen(image_raw(key)); }

  const std::map<std::string, std::vector<float>>& text_entries() const { return text_; }
  const std::map<std::string, std::vector<float>>& image_entries() const { return image_; }

  bool operator==(const EmbeddingCache&) const = default;

 private:
  static Vector widen(const std::vector<float>& v) { return Vector(v.begin(), v.end()); }

  static void add(std::map<std::string, std::vector<float>>& table, std::size_t dim, const std::string& key,
                  std::vector<float> v, const char* kind) {
    require(v.size() == dim, ErrorCode::dim_mismatch,
            std::string(kind) + " vector '" + key + "' has length " + std::to_string(v.size()) +
                ", cache dim is " + std::to_string(dim));
    for (float x : v) require(std::isfinite(x), ErrorCode::non_finite, std::string(kind) + " vector '" + key + "' is not finite");
    require(table.emplace(key, std::move(v)).second, ErrorCode::duplicate_id,
            std::string("duplicate ") + kind + " key '" + key + "'");
  }

  static const std::vector<float>& get(const std::map<std::string, std::vector<float>>& table, const std::string& key,
                                       const char* kind) {
    auto it = table.find(key);
    require(it != table.end(), ErrorCode::dangling_key, std::string("unknown ") + kind + " key '" + key + "'");
    return it->second;
  }

  std::size_t text_dim_ = 0;
  std::size_t image_dim_ = 0;
  std::map<std::string, std::vector<float>> text_;
  std::map<std::string, std::vector<float>> image_;
};

namespace cache_format {
inline constexpr char kMagic[] = "TRCE";
inline constexpr std::uint32_t kVersion = 1;
}  // namespace cache_format

// Layout (all little-endian):
//   "TRCE" u32 version u32 text_dim u32 image_dim u64 text_count u64 image_count
//   u64 float_count (length of the data block in floats)
//   float32 vector data: text entries then image entries, in key-table order
//   key table: per entry {u32 key_len, key bytes, u32 dim}, text entries first
inline std::vector<std::uint8_t> encode_cache(const EmbeddingCache& cache) {
  binio::Writer w;
  w.magic(cache_format::kMagic);
  w.u32(cache_format::kVersion);
  w.u32(static_cast<std::uint32_t>(cache.text_dim()));
  w.u32(static_cast<std::uint32_t>(cache.image_dim()));
  w.u64(cache.text_entries().size());
  w.u64(cache.image_entries().size());
  w.u64(cache.text_entries().size() * cache.text_dim() + cache.image_entries().size() * cache.image_dim());
  for (const auto* table : {&cache.text_entries(), &cache.image_entries()})
    for (const auto& [key, v] : *table)
      for (float x : v) w.f32(x);
  for (const auto* table : {&cache.text_entries(), &cache.image_entries()})
    for (const auto& [key, v] : *table) {
      w.str(key);
      w.u32(static_cast<std::uint32_t>(v.size()));
    }
  return w.buffer();
}

inline void save_cache(const EmbeddingCache& cache, const std::string& path) {
  binio::Writer w;
  const auto bytes = encode_cache(cache);
  w.bytes(bytes.data(), bytes.size());
  w.save(path);
}

inline EmbeddingCache decode_cache(binio::Reader& r) {
  r.expect_magic(cache_format::kMagic);
  const std::uint32_t version = r.u32();
  require(version == cache_format::kVersion, ErrorCode::corrupt,
          "unsupported cache version " + std::to_string(version));
  const std::uint32_t text_dim = r.u32();
  const std::uint32_t image_dim = r.u32();
  const std::uint64_t text_count = r.u64();
  const std::uint64_t image_count = r.u64();
  require(text_dim >= 1 && image_dim >= 1, ErrorCode::corrupt, "cache header has zero dimension");

  const std::uint64_t float_count = r.u64();
  require(r.remaining() / 4 >= float_count, ErrorCode::corrupt, "cache data block is truncated");
  std::vector<float> flat(float_count);
  for (auto& x : flat) x = r.f32();

  // Entry dims are repeated in the key table; any entry that disagrees with
  // the header is a dimension mismatch.
  EmbeddingCache cache(text_dim, image_dim);
  std::size_t offset = 0;
  for (std::uint64_t i = 0; i < text_count + image_count; ++i) {
    const bool is_text = i < text_count;
    const std::string key = r.str();
    const std::uint32_t dim = r.u32();
    const std::uint32_t want = is_text ? text_dim : image_dim;
    require(dim == want, ErrorCode::dim_mismatch,
            std::string(is_text ? "text" : "image") + " vector '" + key + "' has dim " + std::to_string(dim) +
                ", cache header says " + std::to_string(want));
    require(offset + dim <= flat.size(), ErrorCode::corrupt, "cache key table overruns the data block");
    std::vector<float> v(flat.begin() + static_cast<std::ptrdiff_t>(offset),
                         flat.begin() + static_cast<std::ptrdiff_t>(offset + dim));
    offset += dim;
    if (is_text)
      cache.add_text(key, std::move(v));
    else
      cache.add_image(key, std::move(v));
  }
  require(offset == flat.size(), ErrorCode::corrupt, "cache data block has unreferenced floats");
  r.expect_end();
  return cache;
}

inline EmbeddingCache load_cache(const std::string& path) {
  auto r = binio::Reader::open(path, "embedding cache");
  return decode_cache(r);
}

// ---------------------------------------------------------------------------
// Point sidecar files: "TRPT" u32 version u64 count, then count rows of
// float32 x y z r g b.

inline void save_points(const PointCloud& points, const std::string& path) {
  binio::Writer w;
  w.magic("TRPT");
  w.u32(1);
  w.u64(points.size());
  for (const Point& p : points)
    for (double v : {p.x, p.y, p.z, p.r, p.g, p.b}) w.f32(static_cast<float>(v));
  w.save(path);
}

inline PointCloud load_points(const std::string& path) {
  auto r = binio::Reader::open(path, "point file");
  r.expect_magic("TRPT");
  require(r.u32() == 1, ErrorCode::corrupt, "unsupported point file version: " + path);
  const std::uint64_t n = r.u64();
  require(r.remaining() == n * 6 * 4, ErrorCode::corrupt, "point file size does not match its header: " + path);
  PointCloud points(n);
  for (Point& p : points) {
    p.x = r.f32(); p.y = r.f32(); p.z = r.f32();
    p.r = r.f32(); p.g = r.f32(); p.b = r.f32();
  }
  return points;
}

// ---------------------------------------------------------------------------
// Meshes and surface sampling

struct Mesh {
  std::vector<Point> vertices;  // position plus vertex color
  std::vector<std::array<std::uint32_t, 3>> faces;
};

inline double triangle_area(const Point& a, const Point& b, const Point& c) {
  const double ux = b.x - a.x, uy = b.y - a.y, uz = b.z - a.z;
  const double vx = c.x - a.x, vy = c.y - a.y, vz = c.z - a.z;
  const double cx = uy * vz - uz * vy, cy = uz * vx - ux * vz, cz = ux * vy - uy * vx;
  return 0.5 * std::sqrt(cx * cx + cy * cy + cz * cz);
}

/// Area-weighted uniform sampling of the mesh surface. Colors are the
/// barycentric interpolation of the triangle's vertex colors.
inline PointCloud sample_surface_points(const Mesh& mesh, std::size_t n, Rng& rng) {
  require(n >= 1, ErrorCode::invalid_argument, "sample count must be positive");
  require(!mesh.faces.empty(), ErrorCode::degenerate, "mesh has no triangles");
  std::vector<double> cumulative(mesh.faces.size());
  double total = 0.0;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    for (auto vi : mesh.faces[f])
      require(vi < mesh.vertices.size(), ErrorCode::invalid_argument, "face references a missing vertex");
    const auto& [a, b, c] = mesh.faces[f];
    total += triangle_area(mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]);
    cumulative[f] = total;
  }
  require(total > 0.0, ErrorCode::degenerate, "mesh has zero total surface area");

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  PointCloud out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double pick = unit(rng) * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), pick);
    if (it == cumulative.end()) --it;
    const auto& face = mesh.faces[static_cast<std::size_t>(it - cumulative.begin())];
    const Point& a = mesh.vertices[face[0]];
    const Point& b = mesh.vertices[face[1]];
    const Point& c = mesh.vertices[face[2]];
    const double s = std::sqrt(unit(rng));
    const double t = unit(rng);
    const double wa = 1.0 - s, wb = s * (1.0 - t), wc = s * t;
    auto mix = [&](double Point::*f) { return wa * (a.*f) + wb * (b.*f) + wc * (c.*f); };
    out.push_back({mix(&Point::x), mix(&Point::y), mix(&Point::z), mix(&Point::r), mix(&Point::g), mix(&Point::b)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  double scale_lo = 0.9;
  double scale_hi = 1.1;
  double translate = 0.05;
  double keep_lo = 0.875;

  void validate() const {
    require(scale_lo > 0 && scale_lo <= scale_hi, ErrorCode::invalid_argument, "augment scale range is invalid");
    require(translate >= 0, ErrorCode::invalid_argument, "augment translation must be non-negative");
    require(keep_lo > 0 && keep_lo <= 1, ErrorCode::invalid_argument, "augment keep rate must lie in (0, 1]");
  }

  static AugmentConfig identity() { return {1.0, 1.0, 0.0, 1.0}; }
};

inline double uniform_in(double lo, double hi, Rng& rng) {
  if (lo == hi) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Scale, then translate, then drop points. The kept fraction is drawn from
/// [keep_lo, 1] and applied as an exact count, so the output size is bounded
/// by ceil(keep_lo * N) from below.
inline PointCloud augment_points(const PointCloud& points, Rng& rng, const AugmentConfig& config) {
  require(!points.empty(), ErrorCode::invalid_argument, "cannot augment an empty point cloud");
  const double scale = uniform_in(config.scale_lo, config.scale_hi, rng);
  const double tx = uniform_in(-config.translate, config.translate, rng);
  const double ty = uniform_in(-config.translate, config.translate, rng);
  const double tz = uniform_in(-config.translate, config.translate, rng);
  const double keep_rate = uniform_in(config.keep_lo, 1.0, rng);

  PointCloud out = points;
  for (Point& p : out) {
    p.x = p.x * scale + tx;
    p.y = p.y * scale + ty;
    p.z = p.z * scale + tz;
  }
  const auto n = out.size();
  const auto keep = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(keep_rate * static_cast<double>(n))), 1, n);
  if (keep == n) return out;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(keep);
  std::sort(order.begin(), order.end());
  PointCloud kept;
  kept.reserve(keep);
  for (auto i : order) kept.push_back(out[i]);
  return kept;
}

// ---------------------------------------------------------------------------
// Triplets

struct TripletSample {
  std::string shape_id;
  PointCloud points;
  Vector text_vector;
  Vector image_vector;
};

template <class T>
const T& pick_uniform(const std::vector<T>& items, Rng& rng) {
  return items[std::uniform_int_distribution<std::size_t>(0, items.size() - 1)(rng)];
}

/// Uniform category among the non-empty ones, then uniform candidate within it.
inline const std::string& sample_text_key(const ShapeRecord& record, Rng& rng) {
  std::vector<const std::vector<std::string>*> categories;
  for (TextSource s : kTextSources) {
    auto it = record.text_candidates.find(s);
    if (it != record.text_candidates.end() && !it->second.empty()) categories.push_back(&it->second);
  }
  require(!categories.empty(), ErrorCode::text_less, "shape '" + record.id + "' has no text candidates");
  return pick_uniform(*pick_uniform(categories, rng), rng);
}

inline const std::string& sample_view_key(const ShapeRecord& record, Rng& rng) {
  require(!record.image_view_keys.empty(), ErrorCode::invalid_argument,
          "shape '" + record.id + "' has no image views");
  return pick_uniform(record.image_view_keys, rng);
}

inline TripletSample assemble_triplet(const ShapeRecord& record, const EmbeddingCache& cache, Rng& rng) {
  TripletSample t;
  t.shape_id = record.id;
  t.points = record.points;
  t.text_vector = cache.text(sample_text_key(record, rng));
  t.image_vector = cache.image(sample_view_key(record, rng));
  return t;
}

// ---------------------------------------------------------------------------
// Manifests

struct DatasetManifest {
  std::vector<ShapeRecord> records;
  std::string cache_path;
  std::map<std::string, std::string> split_labels;

  bool operator==(const DatasetManifest&) const = default;
};

struct Dataset {
  DatasetManifest manifest;
  EmbeddingCache cache;
};

/// Checks every manifest and cache invariant; the first violation is thrown.
inline void validate(const DatasetManifest& manifest, const EmbeddingCache& cache) {
  require(!manifest.records.empty(), ErrorCode::invalid_argument, "manifest has no records");
  std::set<std::string> ids;
  for (const ShapeRecord& r : manifest.records) {
    require(!r.id.empty(), ErrorCode::invalid_argument, "record with empty id");
    require(ids.insert(r.id).second, ErrorCode::duplicate_id, "duplicate shape id '" + r.id + "'");
    require(!r.points.empty(), ErrorCode::invalid_argument, "shape '" + r.id + "' has no points");
    for (const Point& p : r.points) {
      require(all_finite(std::array{p.x, p.y, p.z}), ErrorCode::non_finite, "shape '" + r.id + "' has a non-finite point");
      for (double c : {p.r, p.g, p.b})
        require(c >= 0.0 && c <= 1.0, ErrorCode::invalid_argument, "shape '" + r.id + "' has a color outside [0,1]");
    }
    require(!r.image_view_keys.empty(), ErrorCode::invalid_argument, "shape '" + r.id + "' has no image views");
    require(dataset_tags().count(r.dataset_tag) != 0, ErrorCode::invalid_argument,
            "shape '" + r.id + "' has unknown dataset tag '" + r.dataset_tag + "'");
    for (const auto& [source, keys] : r.text_candidates)
      for (const auto& key : keys)
        require(cache.has_text(key), ErrorCode::dangling_key,
                "shape '" + r.id + "' references unknown text key '" + key + "'");
    for (const auto& key : r.image_view_keys)
      require(cache.has_image(key), ErrorCode::dangling_key,
              "shape '" + r.id + "' references unknown view key '" + key + "'");
  }
  for (const auto& [id, label] : manifest.split_labels)
    require(ids.count(id) != 0, ErrorCode::dangling_key, "label given for unknown shape '" + id + "'");
}

/// A manifest line as read from disk, before point sampling. `mesh` is set
/// when the record references geometry that still needs to be sampled.
struct ManifestEntry {
  ShapeRecord record;
  std::optional<std::string> label;
  std::optional<Mesh> mesh;
  std::size_t num_points = 10000;
};

struct RawManifest {
  std::string cache_path;  // resolved against the manifest directory
  std::vector<ManifestEntry> entries;
};

namespace detail {

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

inline Point parse_point_row(const json& row, const std::string& id) {
  require(row.is_array() && (row.size() == 3 || row.size() == 6), ErrorCode::parse,
          "shape '" + id + "': point rows must have 3 or 6 numbers");
  Point p{row[0].get<double>(), row[1].get<double>(), row[2].get<double>(), 0, 0, 0};
  if (row.size() == 6) {
    p.r = row[3].get<double>();
    p.g = row[4].get<double>();
    p.b = row[5].get<double>();
  }
  return p;
}

inline ManifestEntry parse_entry(const json& j, const std::filesystem::path& base) {
  ManifestEntry e;
  require(j.is_object() && j.contains("id") && j["id"].is_string(), ErrorCode::parse, "record without a string id");
  ShapeRecord& r = e.record;
  r.id = j["id"].get<std::string>();
  r.dataset_tag = j.value("dataset", std::string("synthetic"));
  if (j.contains("points")) {
    for (const auto& row : j["points"]) r.points.push_back(parse_point_row(row, r.id));
  } else if (j.contains("points_file")) {
    r.points = load_points(resolve(base, j["points_file"].get<std::string>()).string());
  } else if (j.contains("mesh")) {
    Mesh mesh;
    for (const auto& row : j["mesh"].at("vertices")) mesh.vertices.push_back(parse_point_row(row, r.id));
    for (const auto& f : j["mesh"].at("faces"))
      mesh.faces.push_back({f.at(0).get<std::uint32_t>(), f.at(1).get<std::uint32_t>(), f.at(2).get<std::uint32_t>()});
    e.mesh = std::move(mesh);
    e.num_points = j.value("num_points", std::size_t{10000});
  }
  if (j.contains("text")) {
    for (const auto& [category, keys] : j["text"].items())
      r.text_candidates[parse_text_source(category)] = keys.get<std::vector<std::string>>();
  }
  if (j.contains("views")) r.image_view_keys = j["views"].get<std::vector<std::string>>();
  if (j.contains("label")) e.label = j["label"].get<std::string>();
  return e;
}

}  // namespace detail

/// Reads a manifest without validating it. The first line is a header object
/// {"trialign_manifest": 1, "cache": "<path>"}; every later non-blank line is
/// one shape record.
inline RawManifest read_manifest_entries(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::io, "manifest not found: " + path);
  const auto base = std::filesystem::path(path).parent_path();
  RawManifest raw;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& ex) {
      fail(ErrorCode::parse, path + ":" + std::to_string(line_no) + ": " + ex.what());
    }
    try {
      if (!have_header) {
        require(j.is_object() && j.value("trialign_manifest", 0) == 1 && j.contains("cache"), ErrorCode::parse,
                path + ": first line must be the manifest header");
        raw.cache_path = detail::resolve(base, j["cache"].get<std::string>()).string();
        have_header = true;
        continue;
      }
      raw.entries.push_back(detail::parse_entry(j, base));
    } catch (const json::exception& ex) {
      fail(ErrorCode::parse, path + ":" + std::to_string(line_no) + ": " + ex.what());
    }
  }
  require(have_header, ErrorCode::parse, path + ": empty manifest");
  return raw;
}

inline DatasetManifest to_manifest(const RawManifest& raw) {
  DatasetManifest m;
  m.cache_path = raw.cache_path;
  for (const auto& e : raw.entries) {
    require(!e.mesh, ErrorCode::invalid_argument,
            "shape '" + e.record.id + "' references an unsampled mesh; run `prepare` first");
    m.records.push_back(e.record);
    if (e.label) m.split_labels[e.record.id] = *e.label;
  }
  return m;
}

/// Loads and eagerly validates a manifest together with its cache.
inline Dataset load_dataset(const std::string& path) {
  Dataset d;
  d.manifest = to_manifest(read_manifest_entries(path));
  d.cache = load_cache(d.manifest.cache_path);
  validate(d.manifest, d.cache);
  return d;
}

inline DatasetManifest load_manifest(const std::string& path) { return load_dataset(path).manifest; }

enum class PointStorage { inline_json, sidecar };

/// Writes the manifest as JSON lines. With sidecar storage, point clouds go to
/// `<id>.pts` files next to the manifest. `cache_ref` is the path written into
/// the header (defaults to manifest.cache_path).
inline void write_manifest(const DatasetManifest& manifest, const std::string& path,
                           PointStorage storage = PointStorage::inline_json,
                           std::optional<std::string> cache_ref = std::nullopt) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::io, "cannot open for writing: " + path);
  const auto base = std::filesystem::path(path).parent_path();
  out << json{{"trialign_manifest", 1}, {"cache", cache_ref.value_or(manifest.cache_path)}}.dump() << '\n';
  for (const ShapeRecord& r : manifest.records) {
    json j;
    j["id"] = r.id;
    j["dataset"] = r.dataset_tag;
    if (storage == PointStorage::inline_json) {
      json rows = json::array();
      for (const Point& p : r.points) rows.push_back({p.x, p.y, p.z, p.r, p.g, p.b});
      j["points"] = std::move(rows);
    } else {
      const std::string file = r.id + ".pts";
      save_points(r.points, (base / file).string());
      j["points_file"] = file;
    }
    json text = json::object();
    for (const auto& [source, keys] : r.text_candidates) text[to_string(source)] = keys;
    j["text"] = std::move(text);
    j["views"] = r.image_view_keys;
    if (auto it = manifest.split_labels.find(r.id); it != manifest.split_labels.end()) j["label"] = it->second;
    out << j.dump() << '\n';
  }
  require(static_cast<bool>(out), ErrorCode::io, "write failed: " + path);
}

}  // namespace trialign
