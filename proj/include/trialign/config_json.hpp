// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "trialign/encoder.hpp"
#include "trialign/evalkit.hpp"
#include "trialign/trainer.hpp"

// JSON mirrors of the configuration structs. Missing keys keep their
// defaults; unknown keys are rejected so typos do not pass silently.

namespace trialign {

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const char* section) {
  require(j.is_object(), ErrorCode::parse, std::string(section) + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    require(ok, ErrorCode::parse, std::string("unknown key '") + key + "' in " + section);
  }
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j[key].get<T>();
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"point_feature_dims", c.point_feature_dims}, {"head_dims", c.head_dims},
       {"embed_dim", c.embed_dim},                   {"scale_multiplier", c.scale_multiplier},
       {"input_channels", c.input_channels},         {"text_dim", c.text_dim},
       {"image_dim", c.image_dim}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  detail::reject_unknown(j, {"point_feature_dims", "head_dims", "embed_dim", "scale_multiplier", "input_channels",
                             "text_dim", "image_dim"},
                         "encoder config");
  detail::read(j, "point_feature_dims", c.point_feature_dims);
  detail::read(j, "head_dims", c.head_dims);
  detail::read(j, "embed_dim", c.embed_dim);
  detail::read(j, "scale_multiplier", c.scale_multiplier);
  detail::read(j, "input_channels", c.input_channels);
  detail::read(j, "text_dim", c.text_dim);
  detail::read(j, "image_dim", c.image_dim);
}

inline void to_json(nlohmann::json& j, const AugmentConfig& c) {
  j = {{"scale_lo", c.scale_lo}, {"scale_hi", c.scale_hi}, {"translate", c.translate}, {"keep_lo", c.keep_lo}};
}

inline void from_json(const nlohmann::json& j, AugmentConfig& c) {
  detail::reject_unknown(j, {"scale_lo", "scale_hi", "translate", "keep_lo"}, "augment config");
  detail::read(j, "scale_lo", c.scale_lo);
  detail::read(j, "scale_hi", c.scale_hi);
  detail::read(j, "translate", c.translate);
  detail::read(j, "keep_lo", c.keep_lo);
}

inline void to_json(nlohmann::json& j, const MiningConfig& c) {
  j = {{"seeds", c.seeds}, {"group_size", c.group_size}, {"knn_depth", c.knn_depth}, {"delta", c.delta}};
}

inline void from_json(const nlohmann::json& j, MiningConfig& c) {
  detail::reject_unknown(j, {"seeds", "group_size", "knn_depth", "delta"}, "mining config");
  detail::read(j, "seeds", c.seeds);
  detail::read(j, "group_size", c.group_size);
  detail::read(j, "knn_depth", c.knn_depth);
  detail::read(j, "delta", c.delta);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"batch_size", c.batch_size},
       {"lr0", c.lr0},
       {"lr_decay", c.lr_decay},
       {"round1_patience", c.round1_patience},
       {"max_epochs", c.max_epochs},
       {"seed", c.seed},
       {"mining", c.mining},
       {"augment", c.augment},
       {"mask_symmetric", c.mask_symmetric},
       {"hard_mining", c.hard_mining},
       {"neighbor_refresh_epochs", c.neighbor_refresh_epochs},
       {"optimizer", c.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
       {"val_fraction", c.val_fraction}};
  if (c.round1_max_epochs != std::numeric_limits<std::size_t>::max()) j["round1_max_epochs"] = c.round1_max_epochs;
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  detail::reject_unknown(j, {"batch_size", "lr0", "lr_decay", "round1_patience", "round1_max_epochs", "max_epochs",
                             "seed", "mining", "augment", "mask_symmetric", "hard_mining", "neighbor_refresh_epochs",
                             "optimizer", "val_fraction"},
                         "train config");
  detail::read(j, "batch_size", c.batch_size);
  detail::read(j, "lr0", c.lr0);
  detail::read(j, "lr_decay", c.lr_decay);
  detail::read(j, "round1_patience", c.round1_patience);
  detail::read(j, "round1_max_epochs", c.round1_max_epochs);
  detail::read(j, "max_epochs", c.max_epochs);
  detail::read(j, "seed", c.seed);
  detail::read(j, "mining", c.mining);
  detail::read(j, "augment", c.augment);
  detail::read(j, "mask_symmetric", c.mask_symmetric);
  detail::read(j, "hard_mining", c.hard_mining);
  detail::read(j, "neighbor_refresh_epochs", c.neighbor_refresh_epochs);
  detail::read(j, "val_fraction", c.val_fraction);
  if (j.contains("optimizer")) {
    const auto name = j["optimizer"].get<std::string>();
    require(name == "sgd" || name == "adam", ErrorCode::parse, "optimizer must be 'sgd' or 'adam'");
    c.optimizer = name == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
  }
}

inline void to_json(nlohmann::json& j, const ProbeConfig& c) {
  j = {{"shots", c.shots},
       {"seeds", c.seeds},
       {"l2", c.l2},
       {"max_iterations", c.max_iterations},
       {"learning_rate", c.learning_rate}};
}

inline void from_json(const nlohmann::json& j, ProbeConfig& c) {
  detail::reject_unknown(j, {"shots", "seeds", "l2", "max_iterations", "learning_rate"}, "probe config");
  detail::read(j, "shots", c.shots);
  detail::read(j, "seeds", c.seeds);
  detail::read(j, "l2", c.l2);
  detail::read(j, "max_iterations", c.max_iterations);
  detail::read(j, "learning_rate", c.learning_rate);
}

inline void to_json(nlohmann::json& j, const EpochMetrics& m) {
  j = {{"epoch", m.epoch},           {"round", m.round}, {"steps", m.steps}, {"train_loss", m.train_loss},
       {"val_loss", m.val_loss},     {"tau", m.tau},     {"lr", m.lr}};
}

/// Report JSON. Wall time is left out unless asked for, so that reports of
/// seeded runs compare byte-for-byte.
inline nlohmann::json report_json(const TrainReport& r, bool with_timing = false) {
  nlohmann::json j = {{"epochs", r.epochs}, {"best_epoch", r.best_epoch}};
  j["round_switch_epoch"] = r.round_switch_epoch ? nlohmann::json(*r.round_switch_epoch) : nlohmann::json(nullptr);
  if (with_timing) j["wall_time_seconds"] = r.wall_time_seconds;
  return j;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::io, "file not found: " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::parse, path + ": " + e.what());
  }
}

}  // namespace trialign
