// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "trialign/binio.hpp"
#include "trialign/error.hpp"
#include "trialign/linalg.hpp"

namespace trialign {

inline const double kUnclipConditioningNorm = 0.5 * std::sqrt(768.0);

using Metadata = std::map<std::string, std::string>;

/// Exact cosine index over unit-norm shape embeddings, rows in insertion order.
struct RetrievalIndex {
  std::vector<std::string> ids;
  Matrix rows;
  std::map<std::string, Metadata> metadata;

  std::size_t size() const { return ids.size(); }
  std::size_t dim() const { return rows.cols(); }

  std::optional<std::size_t> find(const std::string& id) const {
    auto it = std::find(ids.begin(), ids.end(), id);
    if (it == ids.end()) return std::nullopt;
    return static_cast<std::size_t>(it - ids.begin());
  }

  bool operator==(const RetrievalIndex&) const = default;
};

/// Normalizes rows on ingest; rejects duplicate ids and zero vectors.
inline RetrievalIndex build_index(const std::vector<std::string>& ids, const std::vector<Vector>& embeddings,
                                  std::map<std::string, Metadata> metadata = {}) {
  require(!ids.empty(), ErrorCode::invalid_argument, "index needs at least one embedding");
  require(ids.size() == embeddings.size(), ErrorCode::dim_mismatch, "one embedding per id is required");
  std::set<std::string> seen;
  std::vector<Vector> rows;
  rows.reserve(ids.size());
  const std::size_t dim = embeddings.front().size();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(seen.insert(ids[i]).second, ErrorCode::duplicate_id, "duplicate index id '" + ids[i] + "'");
    require(embeddings[i].size() == dim, ErrorCode::dim_mismatch, "embedding of '" + ids[i] + "' has a different dim");
    require(all_finite(embeddings[i]), ErrorCode::non_finite, "embedding of '" + ids[i] + "' is not finite");
    rows.push_back(normalized(embeddings[i], "embedding of '" + ids[i] + "'"));
  }
  return {ids, Matrix::from_rows(rows), std::move(metadata)};
}

inline RetrievalIndex build_index(const std::vector<std::string>& ids, const Matrix& embeddings,
                                  std::map<std::string, Metadata> metadata = {}) {
  std::vector<Vector> rows;
  for (std::size_t i = 0; i < embeddings.rows(); ++i) rows.emplace_back(embeddings.row(i).begin(), embeddings.row(i).end());
  return build_index(ids, rows, std::move(metadata));
}

struct Hit {
  std::string id;
  std::size_t row = 0;
  double score = 0.0;
  bool operator==(const Hit&) const = default;
};

namespace detail {

inline Vector query_vector(const RetrievalIndex& index, std::span<const double> q, const char* what) {
  require(q.size() == index.dim(), ErrorCode::dim_mismatch,
          std::string(what) + " has dim " + std::to_string(q.size()) + ", index has dim " + std::to_string(index.dim()));
  require(all_finite(q), ErrorCode::non_finite, std::string(what) + " is not finite");
  return normalized(q, what);
}

template <class Score>
std::vector<Hit> rank(const RetrievalIndex& index, std::size_t k, Score score) {
  require(k >= 1, ErrorCode::invalid_argument, "k must be positive");
  std::vector<Hit> hits(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) hits[i] = {index.ids[i], i, score(index.rows.row(i))};
  const std::size_t top = std::min(k, hits.size());
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(top), hits.end(),
                    [](const Hit& a, const Hit& b) { return a.score != b.score ? a.score > b.score : a.row < b.row; });
  hits.resize(top);
  return hits;
}

}  // namespace detail

/// Top-k rows by cosine similarity to q; k is clamped to the index size.
inline std::vector<Hit> query(const RetrievalIndex& index, std::span<const double> q, std::size_t k) {
  const Vector u = detail::query_vector(index, q, "query");
  return detail::rank(index, k, [&](std::span<const double> row) { return dot(row, u); });
}

/// Ranks rows by min(cos(row, a), cos(row, b)): shapes close to both inputs.
inline std::vector<Hit> query_joint(const RetrievalIndex& index, std::span<const double> a, std::span<const double> b,
                                    std::size_t k) {
  const Vector ua = detail::query_vector(index, a, "first query");
  const Vector ub = detail::query_vector(index, b, "second query");
  return detail::rank(index, k, [&](std::span<const double> row) { return std::min(dot(row, ua), dot(row, ub)); });
}

/// Rescales v to `target_norm`, by default the mean norm of 768-d image
/// embeddings expected by image generators conditioned on CLIP vectors.
inline Vector renorm_for_conditioning(std::span<const double> v, double target_norm = kUnclipConditioningNorm) {
  require(target_norm > 0.0, ErrorCode::invalid_argument, "target norm must be positive");
  const double n = norm(v);
  require(n > 0.0, ErrorCode::degenerate, "cannot re-normalize a zero vector");
  Vector out(v.begin(), v.end());
  for (double& x : out) x *= target_norm / n;
  return out;
}

// "TRIX" u32 version u64 count u64 dim, then per row {id, float64 x dim},
// then u64 metadata entries of {id, u32 field count, {key, value}...}.
inline void save_index(const RetrievalIndex& index, const std::string& path) {
  binio::Writer w;
  w.magic("TRIX");
  w.u32(1);
  w.u64(index.size());
  w.u64(index.dim());
  for (std::size_t i = 0; i < index.size(); ++i) {
    w.str(index.ids[i]);
    for (double x : index.rows.row(i)) w.f64(x);
  }
  w.u64(index.metadata.size());
  for (const auto& [id, fields] : index.metadata) {
    w.str(id);
    w.u32(static_cast<std::uint32_t>(fields.size()));
    for (const auto& [k, v] : fields) {
      w.str(k);
      w.str(v);
    }
  }
  w.save(path);
}

inline RetrievalIndex load_index(const std::string& path) {
  auto r = binio::Reader::open(path, "retrieval index");
  r.expect_magic("TRIX");
  require(r.u32() == 1, ErrorCode::corrupt, "unsupported index version");
  const std::uint64_t n = r.u64();
  const std::uint64_t dim = r.u64();
  RetrievalIndex index;
  index.rows = Matrix(n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    index.ids.push_back(r.str());
    for (double& x : index.rows.row(i)) x = r.f64();
  }
  const std::uint64_t meta = r.u64();
  for (std::uint64_t m = 0; m < meta; ++m) {
    const std::string id = r.str();
    Metadata& fields = index.metadata[id];
    const std::uint32_t count = r.u32();
    for (std::uint32_t f = 0; f < count; ++f) {
      std::string k = r.str();
      fields[k] = r.str();
    }
  }
  r.expect_end();
  return index;
}

}  // namespace trialign
