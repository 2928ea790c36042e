// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "trialign/binio.hpp"
#include "trialign/encoder.hpp"

namespace trialign {

namespace checkpoint_format {
inline constexpr char kMagic[] = "TRCK";
inline constexpr std::uint32_t kVersion = 1;
}  // namespace checkpoint_format

// Layout: "TRCK" u32 version, config echo, u64 parameter count, then the
// parameters as little-endian float64.
inline void save_checkpoint(const ModelState& state, const std::string& path) {
  const ParamLayout layout = state.layout();
  require(state.params.size() == layout.total, ErrorCode::layout_mismatch,
          "parameter vector does not match the encoder config");
  const EncoderConfig& c = state.config;
  binio::Writer w;
  w.magic(checkpoint_format::kMagic);
  w.u32(checkpoint_format::kVersion);
  w.u32(static_cast<std::uint32_t>(c.input_channels));
  w.u64(c.embed_dim);
  w.f64(c.scale_multiplier);
  w.u64(c.text_dim);
  w.u64(c.image_dim);
  w.u32(static_cast<std::uint32_t>(c.point_feature_dims.size()));
  for (auto d : c.point_feature_dims) w.u64(d);
  w.u32(static_cast<std::uint32_t>(c.head_dims.size()));
  for (auto d : c.head_dims) w.u64(d);
  w.u64(state.params.size());
  for (double p : state.params) w.f64(p);
  w.save(path);
}

inline ModelState load_checkpoint(const std::string& path) {
  auto r = binio::Reader::open(path, "checkpoint");
  r.expect_magic(checkpoint_format::kMagic);
  const std::uint32_t version = r.u32();
  require(version == checkpoint_format::kVersion, ErrorCode::corrupt,
          "unsupported checkpoint version " + std::to_string(version));
  ModelState s;
  EncoderConfig& c = s.config;
  c.input_channels = r.u32();
  c.embed_dim = r.u64();
  c.scale_multiplier = r.f64();
  c.text_dim = r.u64();
  c.image_dim = r.u64();
  c.point_feature_dims.resize(r.u32());
  for (auto& d : c.point_feature_dims) d = r.u64();
  c.head_dims.resize(r.u32());
  for (auto& d : c.head_dims) d = r.u64();
  const std::uint64_t count = r.u64();
  require(r.remaining() == count * 8, ErrorCode::corrupt, "checkpoint is truncated: " + path);
  s.params.resize(count);
  for (double& p : s.params) p = r.f64();
  try {
    c.validate();
  } catch (const Error& e) {
    fail(ErrorCode::corrupt, "checkpoint config is invalid: " + std::string(e.what()));
  }
  require(ParamLayout(c).total == count, ErrorCode::layout_mismatch,
          "checkpoint parameter count does not match its config");
  return s;
}

/// Loads a checkpoint and checks that it was written for `expected`.
inline ModelState load_checkpoint(const std::string& path, const EncoderConfig& expected) {
  ModelState s = load_checkpoint(path);
  require(s.config == expected, ErrorCode::layout_mismatch,
          "checkpoint layout (embed_dim " + std::to_string(s.config.embed_dim) + ", " +
              std::to_string(s.params.size()) + " params) does not match the requested encoder config (embed_dim " +
              std::to_string(expected.embed_dim) + ", " + std::to_string(parameter_count(expected)) + " params)");
  return s;
}

}  // namespace trialign
