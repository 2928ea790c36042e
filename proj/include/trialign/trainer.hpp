// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "trialign/alignloss.hpp"
#include "trialign/datamodel.hpp"
#include "trialign/encoder.hpp"
#include "trialign/error.hpp"
#include "trialign/mining.hpp"

namespace trialign {

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
  std::size_t batch_size = 200;
  double lr0 = 1e-3;
  double lr_decay = 1.0;  // per optimizer step
  std::size_t round1_patience = 3;
  std::size_t round1_max_epochs = std::numeric_limits<std::size_t>::max();
  std::size_t max_epochs = 30;
  std::uint64_t seed = 0;
  MiningConfig mining;
  AugmentConfig augment;
  bool mask_symmetric = false;
  bool hard_mining = true;
  std::size_t neighbor_refresh_epochs = 0;  // 0: compute the kNN table once
  OptimizerKind optimizer = OptimizerKind::sgd;
  double val_fraction = 0.05;

  void validate() const {
    require(batch_size >= 1, ErrorCode::invalid_argument, "batch_size must be positive");
    require(lr0 >= 0.0 && std::isfinite(lr0), ErrorCode::invalid_argument, "lr0 must be non-negative");
    require(lr_decay > 0.0 && lr_decay <= 1.0, ErrorCode::invalid_argument, "lr_decay must lie in (0, 1]");
    require(val_fraction >= 0.0 && val_fraction < 1.0, ErrorCode::invalid_argument, "val_fraction must lie in [0, 1)");
    mining.validate();
    augment.validate();
  }
};

/// Exponential schedule: lr0 * decay^step.
inline double lr_at(std::size_t step, const TrainConfig& config) {
  return config.lr0 * std::pow(config.lr_decay, static_cast<double>(step));
}

struct EpochMetrics {
  std::size_t epoch = 0;
  int round = 1;
  std::size_t steps = 0;  // cumulative optimizer steps at epoch end
  double train_loss = 0.0;
  double val_loss = 0.0;
  double tau = 0.0;
  double lr = 0.0;
  bool operator==(const EpochMetrics&) const = default;
};

struct TrainReport {
  std::vector<EpochMetrics> epochs;
  std::optional<std::size_t> round_switch_epoch;  // first epoch trained in round 2
  std::size_t best_epoch = 0;
  double wall_time_seconds = 0.0;
};

/// Seen by the optional per-step observer: the exact inputs of the loss.
struct StepView {
  std::size_t epoch;
  std::size_t step;
  int round;
  const AlignedBatch& batch;
  const NegativeMask& mask;
  double tau;
  double loss;
};

struct TrainHooks {
  std::function<void(const StepView&)> on_step;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
  ModelState state;  // best-validation parameters
  ModelState last;   // parameters after the final step
  TrainReport report;
};

/// FNV-1a 64-bit, the stable hash behind the validation split.
inline std::uint64_t stable_hash(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline bool in_validation_split(const std::string& id, double fraction) {
  return static_cast<double>(stable_hash(id) % 1000000ull) < fraction * 1e6;
}

namespace detail {

class Optimizer {
 public:
  Optimizer(OptimizerKind kind, std::size_t n) : kind_(kind) {
    if (kind_ == OptimizerKind::adam) {
      m_.assign(n, 0.0);
      v_.assign(n, 0.0);
    }
  }

  void step(std::vector<double>& params, std::span<const double> grad, double lr) {
    if (kind_ == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
      return;
    }
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t_;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1 * m_[i] + (1.0 - b1) * grad[i];
      v_[i] = b2 * v_[i] + (1.0 - b2) * grad[i] * grad[i];
      params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps);
    }
  }

 private:
  OptimizerKind kind_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

/// Forward results of one batch, kept for the backward pass.
struct BatchForward {
  AlignedBatch batch;
  std::vector<PointNetEncoder::Trace> traces;
  std::vector<Vector> text_raw, image_raw;
  std::vector<double> shape_norm, text_norm, image_norm;
};

inline BatchForward forward_batch(const std::vector<const ShapeRecord*>& shapes, const EmbeddingCache& cache,
                                  const ModelState& state, Rng& rng, const AugmentConfig* augment) {
  const std::size_t n = shapes.size();
  const std::size_t d = state.config.embed_dim;
  BatchForward f;
  f.batch.HP = Matrix(n, d);
  f.batch.HT = Matrix(n, d);
  f.batch.HI = Matrix(n, d);
  f.batch.text_valid.assign(n, true);
  f.text_raw.resize(n);
  f.image_raw.resize(n);
  f.shape_norm.assign(n, 0.0);
  f.text_norm.assign(n, 0.0);
  f.image_norm.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const ShapeRecord& r = *shapes[i];
    if (r.has_text())
      f.text_raw[i] = cache.text(sample_text_key(r, rng));
    else
      f.batch.text_valid[i] = false;
    f.image_raw[i] = cache.image(sample_view_key(r, rng));
    const PointCloud points = augment ? augment_points(r.points, rng, *augment) : r.points;

    f.traces.push_back(PointNetEncoder::forward(point_features(points, state.config.input_channels), state));
    auto write_unit = [](const Vector& raw, std::span<double> row, double& len, const std::string& what) {
      const Vector h = normalized(raw, what);
      len = norm(raw);
      std::copy(h.begin(), h.end(), row.begin());
    };
    write_unit(f.traces.back().output, f.batch.HP.row(i), f.shape_norm[i], "shape feature of '" + r.id + "'");
    if (f.batch.text_valid[i])
      write_unit(project_raw(f.text_raw[i], state, Modality::text), f.batch.HT.row(i), f.text_norm[i],
                 "projected text of '" + r.id + "'");
    write_unit(project_raw(f.image_raw[i], state, Modality::image), f.batch.HI.row(i), f.image_norm[i],
               "projected image of '" + r.id + "'");
  }
  return f;
}

/// Full gradient of the batch loss w.r.t. every parameter in `state`.
inline std::vector<double> backward_batch(const BatchForward& f, const LossGrad& lg, const ModelState& state) {
  std::vector<double> grad(state.params.size(), 0.0);
  const ParamLayout layout = state.layout();
  for (std::size_t i = 0; i < f.batch.size(); ++i) {
    const Vector gp = normalize_backward(f.batch.HP.row(i), f.shape_norm[i], lg.dHP.row(i));
    PointNetEncoder::backward(f.traces[i], state, gp, grad);
    if (f.batch.text_valid[i]) {
      const Vector gt = normalize_backward(f.batch.HT.row(i), f.text_norm[i], lg.dHT.row(i));
      project_backward(f.text_raw[i], state, Modality::text, gt, grad);
    }
    const Vector gi = normalize_backward(f.batch.HI.row(i), f.image_norm[i], lg.dHI.row(i));
    project_backward(f.image_raw[i], state, Modality::image, gi, grad);
  }
  grad[layout.log_tau] += lg.d_log_tau;
  return grad;
}

inline void clamp_temperature(ModelState& state) {
  double& lt = state.params.back();
  lt = std::clamp(lt, std::log(kTauMin), std::log(kTauMax));
}

}  // namespace detail

/// Loss over `shapes` in consecutive chunks of `batch_size`, with a fixed
/// triplet draw from `seed`, no augmentation and no masking.
inline double evaluation_loss(const std::vector<const ShapeRecord*>& shapes, const EmbeddingCache& cache,
                              const ModelState& state, std::size_t batch_size, std::uint64_t seed) {
  if (shapes.empty()) return std::numeric_limits<double>::quiet_NaN();
  Rng rng(seed);
  double total = 0.0;
  for (std::size_t start = 0; start < shapes.size(); start += batch_size) {
    const std::size_t end = std::min(shapes.size(), start + batch_size);
    std::vector<const ShapeRecord*> chunk(shapes.begin() + static_cast<std::ptrdiff_t>(start),
                                          shapes.begin() + static_cast<std::ptrdiff_t>(end));
    const auto f = detail::forward_batch(chunk, cache, state, rng, nullptr);
    total += contrastive_loss(f.batch, state.tau(), NegativeMask(chunk.size())) * static_cast<double>(chunk.size());
  }
  return total / static_cast<double>(shapes.size());
}

/// Two-round training. Round 1 draws shuffled random batches; once validation
/// loss stops improving by more than 0.1% for `round1_patience` epochs (or at
/// `round1_max_epochs`) the kNN table is built from the current embeddings and
/// round 2 trains on seeded batches with the false-negative mask.
inline TrainResult train(const Dataset& data, const EncoderConfig& encoder_config, const TrainConfig& config,
                         const TrainHooks& hooks = {}) {
  const auto wall_start = std::chrono::steady_clock::now();
  config.validate();
  encoder_config.validate();
  const EmbeddingCache& cache = data.cache;
  require(encoder_config.text_dim == cache.text_dim() && encoder_config.image_dim == cache.image_dim(),
          ErrorCode::dim_mismatch,
          "encoder projections expect text/image dims " + std::to_string(encoder_config.text_dim) + "/" +
              std::to_string(encoder_config.image_dim) + ", cache has " + std::to_string(cache.text_dim()) + "/" +
              std::to_string(cache.image_dim()));

  std::vector<const ShapeRecord*> train_set, val_set;
  for (const ShapeRecord& r : data.manifest.records)
    (in_validation_split(r.id, config.val_fraction) ? val_set : train_set).push_back(&r);
  require(config.batch_size <= train_set.size(), ErrorCode::insufficient_data,
          "batch_size " + std::to_string(config.batch_size) + " exceeds the " + std::to_string(train_set.size()) +
              " training shapes");

  Rng rng(config.seed);
  Rng init_rng(config.seed ^ 0x9e3779b97f4a7c15ull);
  ModelState state = ModelState::initialize(encoder_config, init_rng);
  detail::Optimizer optimizer(config.optimizer, state.params.size());
  const std::uint64_t val_seed = config.seed ^ 0x5851f42d4c957f2dull;

  TrainResult result;
  result.state = state;
  double best_val = std::numeric_limits<double>::infinity();
  double patience_ref = std::numeric_limits<double>::infinity();
  std::size_t stale_epochs = 0;
  int round = 1;
  std::size_t step = 0;
  std::optional<NeighborTable> table;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  auto run_step = [&](const std::vector<const ShapeRecord*>& shapes, const BatchPlan* plan, std::size_t epoch) {
    auto f = detail::forward_batch(shapes, cache, state, rng, &config.augment);
    NegativeMask mask(shapes.size());
    if (plan) {
      mask = false_negative_mask(*plan, f.batch.HT, f.batch.HI, config.mining.delta, f.batch.text_valid);
      if (config.mask_symmetric) mask = mask.symmetrized();
    }
    const double tau = state.tau();
    const LossGrad lg = contrastive_loss_grad(f.batch, tau, mask);
    if (!std::isfinite(lg.loss)) {
      std::ostringstream msg;
      msg << "non-finite loss at epoch " << epoch << ", step " << step << " (tau " << tau << ")";
      fail(ErrorCode::non_finite, msg.str());
    }
    if (hooks.on_step) hooks.on_step(StepView{epoch, step, round, f.batch, mask, tau, lg.loss});
    const auto grad = detail::backward_batch(f, lg, state);
    optimizer.step(state.params, grad, lr_at(step, config));
    detail::clamp_temperature(state);
    require(all_finite(state.params), ErrorCode::non_finite,
            "parameters became non-finite at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
    ++step;
    return lg.loss;
  };

  auto rebuild_table = [&]() {
    std::vector<ShapeRecord> records;
    std::vector<std::string> ids;
    records.reserve(train_set.size());
    for (const ShapeRecord* r : train_set) {
      records.push_back(*r);
      ids.push_back(r->id);
    }
    table = build_neighbor_table(ids, embed_shapes(records, state), config.mining.knn_depth);
  };

  std::size_t round2_epochs = 0;
  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t batches = 0;
    if (round == 1) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
        const std::size_t end = std::min(order.size(), start + config.batch_size);
        std::vector<const ShapeRecord*> shapes;
        for (std::size_t k = start; k < end; ++k) shapes.push_back(train_set[order[k]]);
        loss_sum += run_step(shapes, nullptr, epoch);
        ++batches;
      }
    } else {
      if (config.neighbor_refresh_epochs > 0 && round2_epochs > 0 &&
          round2_epochs % config.neighbor_refresh_epochs == 0)
        rebuild_table();
      const std::size_t per_epoch = std::max<std::size_t>(1, train_set.size() / config.mining.batch_size());
      for (const BatchPlan& plan : build_seeded_batches(*table, config.mining, rng, per_epoch)) {
        std::vector<const ShapeRecord*> shapes;
        for (auto idx : plan.indices) shapes.push_back(train_set[idx]);
        loss_sum += run_step(shapes, &plan, epoch);
        ++batches;
      }
      ++round2_epochs;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.round = round;
    m.steps = step;
    m.train_loss = loss_sum / static_cast<double>(batches);
    // Without a validation split the training loss stands in.
    m.val_loss = val_set.empty() ? m.train_loss : evaluation_loss(val_set, cache, state, config.batch_size, val_seed);
    m.tau = state.tau();
    m.lr = lr_at(step, config);
    result.report.epochs.push_back(m);
    if (hooks.on_epoch) hooks.on_epoch(m);

    if (m.val_loss < best_val) {
      best_val = m.val_loss;
      result.state = state;
      result.report.best_epoch = epoch;
    }
    if (round == 1 && config.hard_mining) {
      if (m.val_loss < patience_ref * (1.0 - 1e-3)) {
        patience_ref = m.val_loss;
        stale_epochs = 0;
      } else {
        ++stale_epochs;
      }
      if (stale_epochs >= config.round1_patience || epoch + 1 >= config.round1_max_epochs) {
        round = 2;
        result.report.round_switch_epoch = epoch + 1;
        rebuild_table();
      }
    }
  }
  result.last = state;
  result.report.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
  return result;
}

}  // namespace trialign
