// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "trialign/alignloss.hpp"
#include "trialign/binio.hpp"
#include "trialign/datamodel.hpp"
#include "trialign/error.hpp"
#include "trialign/linalg.hpp"

namespace trialign {

struct MiningConfig {
  std::size_t seeds = 40;      // s
  std::size_t group_size = 5;  // m: seed plus m-1 neighbors
  std::size_t knn_depth = 10;  // k
  double delta = 0.1;

  std::size_t batch_size() const { return seeds * group_size; }

  void validate() const {
    require(seeds >= 1, ErrorCode::invalid_argument, "mining needs at least one seed per batch");
    require(group_size >= 1, ErrorCode::invalid_argument, "mining group size must be positive");
    require(knn_depth >= group_size, ErrorCode::invalid_argument, "kNN depth must be at least the group size");
    require(delta >= 0.0, ErrorCode::invalid_argument, "false-negative threshold must be non-negative");
  }
};

struct Neighbor {
  std::size_t index = 0;
  double similarity = 0.0;
  bool operator==(const Neighbor&) const = default;
};

/// Exact cosine kNN lists, one per shape, most similar first.
struct NeighborTable {
  std::vector<std::string> ids;
  std::vector<std::vector<Neighbor>> rows;

  std::size_t size() const { return ids.size(); }
  bool operator==(const NeighborTable&) const = default;
};

/// Ordering used for every neighbor list: similarity descending, then id ascending.
struct NeighborOrder {
  const std::vector<std::string>* ids;
  bool operator()(const Neighbor& a, const Neighbor& b) const {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return (*ids)[a.index] < (*ids)[b.index];
  }
};

inline NeighborTable build_neighbor_table(const std::vector<std::string>& ids, const Matrix& embeddings,
                                          std::size_t k) {
  const std::size_t n = ids.size();
  require(n >= 2, ErrorCode::insufficient_data, "kNN needs at least two shapes");
  require(embeddings.rows() == n, ErrorCode::dim_mismatch, "one embedding row per id is required");
  require(k >= 1, ErrorCode::invalid_argument, "kNN depth must be positive");
  for (std::size_t i = 0; i < n; ++i)
    require(std::abs(norm(embeddings.row(i)) - 1.0) <= 1e-6, ErrorCode::invalid_argument,
            "embedding of '" + ids[i] + "' is not unit-norm");

  NeighborTable table;
  table.ids = ids;
  table.rows.resize(n);
  const std::size_t depth = std::min(k, n - 1);
  const NeighborOrder order{&table.ids};
  std::vector<Neighbor> candidates;
  candidates.reserve(n - 1);
  for (std::size_t q = 0; q < n; ++q) {
    candidates.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != q) candidates.push_back({j, dot(embeddings.row(q), embeddings.row(j))});
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(depth), candidates.end(),
                      order);
    table.rows[q].assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(depth));
  }
  return table;
}

// Sidecar layout: "TRNB" u32 version u64 n u64 depth, n id strings, then n
// fixed-width rows of depth x {u64 index, f64 similarity}.
inline void save_neighbor_table(const NeighborTable& table, const std::string& path) {
  binio::Writer w;
  w.magic("TRNB");
  w.u32(1);
  const std::size_t depth = table.rows.empty() ? 0 : table.rows.front().size();
  w.u64(table.size());
  w.u64(depth);
  for (const auto& id : table.ids) w.str(id);
  for (const auto& row : table.rows) {
    require(row.size() == depth, ErrorCode::invalid_argument, "neighbor rows must have equal length");
    for (const Neighbor& nb : row) {
      w.u64(nb.index);
      w.f64(nb.similarity);
    }
  }
  w.save(path);
}

inline NeighborTable load_neighbor_table(const std::string& path) {
  auto r = binio::Reader::open(path, "neighbor table");
  r.expect_magic("TRNB");
  require(r.u32() == 1, ErrorCode::corrupt, "unsupported neighbor table version");
  NeighborTable table;
  const std::uint64_t n = r.u64();
  const std::uint64_t depth = r.u64();
  require(depth < n || n == 0, ErrorCode::corrupt, "neighbor table depth exceeds shape count");
  table.ids.resize(n);
  for (auto& id : table.ids) id = r.str();
  table.rows.assign(n, std::vector<Neighbor>(depth));
  for (auto& row : table.rows)
    for (Neighbor& nb : row) {
      nb.index = r.u64();
      nb.similarity = r.f64();
      require(nb.index < n, ErrorCode::corrupt, "neighbor index out of range");
    }
  r.expect_end();
  return table;
}

/// Batch positions grouped by seed; group g occupies positions [g*m, (g+1)*m).
struct BatchPlan {
  std::vector<std::size_t> indices;
  std::vector<std::size_t> seed_of;

  std::size_t size() const { return indices.size(); }
  bool operator==(const BatchPlan&) const = default;
};

/// Draws `epoch_size` batches. Each batch picks s seeds uniformly among the
/// shapes not yet in the batch; each seed brings its top m-1 neighbors that
/// are still free, skipping taken ones. An exhausted neighbor list is padded
/// with uniformly drawn free shapes.
inline std::vector<BatchPlan> build_seeded_batches(const NeighborTable& table, const MiningConfig& config, Rng& rng,
                                                   std::size_t epoch_size) {
  config.validate();
  const std::size_t n = table.size();
  require(config.batch_size() <= n, ErrorCode::insufficient_data,
          "seeded batch of " + std::to_string(config.batch_size()) + " needs more than " + std::to_string(n) +
              " shapes");
  std::vector<BatchPlan> plans;
  plans.reserve(epoch_size);
  std::vector<bool> taken(n);
  std::vector<std::size_t> free_list;
  for (std::size_t b = 0; b < epoch_size; ++b) {
    std::fill(taken.begin(), taken.end(), false);
    free_list.resize(n);
    std::iota(free_list.begin(), free_list.end(), 0);
    // Swap-remove from the free list, so draws stay uniform over free shapes.
    auto take = [&](std::size_t idx) {
      taken[idx] = true;
      auto it = std::find(free_list.begin(), free_list.end(), idx);
      *it = free_list.back();
      free_list.pop_back();
    };
    auto draw_free = [&]() {
      const std::size_t pos = std::uniform_int_distribution<std::size_t>(0, free_list.size() - 1)(rng);
      return free_list[pos];
    };

    BatchPlan plan;
    plan.indices.reserve(config.batch_size());
    for (std::size_t g = 0; g < config.seeds; ++g) {
      const std::size_t seed = draw_free();
      take(seed);
      plan.indices.push_back(seed);
      std::size_t members = 1;
      for (const Neighbor& nb : table.rows[seed]) {
        if (members == config.group_size) break;
        if (taken[nb.index]) continue;
        take(nb.index);
        plan.indices.push_back(nb.index);
        ++members;
      }
      for (; members < config.group_size; ++members) {
        const std::size_t extra = draw_free();
        take(extra);
        plan.indices.push_back(extra);
      }
      plan.seed_of.insert(plan.seed_of.end(), config.group_size, g);
    }
    plans.push_back(std::move(plan));
  }
  return plans;
}

/// Within a seed group, j leaves i's negatives when HT_j.HI_i + delta > HT_i.HI_i.
/// Pairs involving a text-less shape (text_valid false) are never excluded.
inline NegativeMask false_negative_mask(const BatchPlan& plan, const Matrix& HT, const Matrix& HI, double delta,
                                        const std::vector<bool>& text_valid = {}) {
  const std::size_t n = plan.size();
  require(plan.seed_of.size() == n, ErrorCode::invalid_argument, "plan has no seed groups");
  require(HT.rows() == n && HI.rows() == n, ErrorCode::dim_mismatch, "embedding rows must match the batch plan");
  require(HT.cols() == HI.cols(), ErrorCode::dim_mismatch, "text and image embeddings differ in dim");
  auto valid = [&](std::size_t i) { return text_valid.empty() || text_valid[i]; };
  NegativeMask mask(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!valid(i)) continue;
    const double positive = dot(HT.row(i), HI.row(i));
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i || plan.seed_of[j] != plan.seed_of[i] || !valid(j)) continue;
      if (dot(HT.row(j), HI.row(i)) + delta > positive) mask.exclude(i, j);
    }
  }
  return mask;
}

}  // namespace trialign
