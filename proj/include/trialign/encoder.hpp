// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "trialign/datamodel.hpp"
#include "trialign/error.hpp"
#include "trialign/linalg.hpp"

namespace trialign {

inline constexpr double kTauInit = 0.07;
inline constexpr double kTauMin = 1e-3;
inline constexpr double kTauMax = 100.0;

/// Shape of the reference point encoder and of the two projection heads.
///
/// Hidden widths are multiplied by `scale_multiplier` and floored; the last
/// head width is the embedding dimension and is never scaled.
struct EncoderConfig {
  std::vector<std::size_t> point_feature_dims = {64, 128};
  std::vector<std::size_t> head_dims = {128, 64};
  std::size_t embed_dim = 64;
  double scale_multiplier = 1.0;
  std::size_t input_channels = 6;
  std::size_t text_dim = 64;
  std::size_t image_dim = 64;

  bool operator==(const EncoderConfig&) const = default;

  static std::size_t scaled(std::size_t width, double scale) {
    const double w = std::floor(static_cast<double>(width) * scale + 1e-9);
    require(w >= 1.0, ErrorCode::invalid_argument,
            "scale_multiplier " + std::to_string(scale) + " shrinks width " + std::to_string(width) + " below 1");
    return static_cast<std::size_t>(w);
  }

  std::vector<std::size_t> scaled_point_dims() const {
    std::vector<std::size_t> out;
    for (auto w : point_feature_dims) out.push_back(scaled(w, scale_multiplier));
    return out;
  }

  std::vector<std::size_t> scaled_head_dims() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i + 1 < head_dims.size(); ++i) out.push_back(scaled(head_dims[i], scale_multiplier));
    out.push_back(head_dims.back());
    return out;
  }

  void validate() const {
    require(input_channels == 3 || input_channels == 6, ErrorCode::invalid_argument, "input_channels must be 3 or 6");
    require(embed_dim >= 1, ErrorCode::invalid_argument, "embed_dim must be positive");
    require(scale_multiplier > 0.0 && std::isfinite(scale_multiplier), ErrorCode::invalid_argument,
            "scale_multiplier must be positive");
    require(!point_feature_dims.empty(), ErrorCode::invalid_argument, "encoder needs at least one per-point layer");
    require(!head_dims.empty() && head_dims.back() == embed_dim, ErrorCode::invalid_argument,
            "last head width must equal embed_dim");
    require(text_dim >= 1 && image_dim >= 1, ErrorCode::invalid_argument, "projection input dims must be positive");
    for (auto w : point_feature_dims) require(w >= 1, ErrorCode::invalid_argument, "layer width must be positive");
    for (auto w : head_dims) require(w >= 1, ErrorCode::invalid_argument, "layer width must be positive");
    (void)scaled_point_dims();
    (void)scaled_head_dims();
  }
};

/// Offsets of one affine layer (weights stored out x in, row-major, then bias).
struct DenseSlot {
  std::size_t in = 0, out = 0, offset = 0;
  std::size_t weight_count() const { return in * out; }
  std::size_t size() const { return in * out + out; }
  std::size_t bias_offset() const { return offset + in * out; }
};

/// Where each trainable tensor lives inside the flat parameter vector.
struct ParamLayout {
  std::vector<DenseSlot> point_layers;
  std::vector<DenseSlot> head_layers;
  DenseSlot text_proj;
  DenseSlot image_proj;
  std::size_t log_tau = 0;
  std::size_t total = 0;

  explicit ParamLayout(const EncoderConfig& config) {
    config.validate();
    std::size_t off = 0;
    auto add = [&off](std::size_t in, std::size_t out) {
      DenseSlot s{in, out, off};
      off += s.size();
      return s;
    };
    std::size_t in = config.input_channels;
    for (auto w : config.scaled_point_dims()) {
      point_layers.push_back(add(in, w));
      in = w;
    }
    for (auto w : config.scaled_head_dims()) {
      head_layers.push_back(add(in, w));
      in = w;
    }
    text_proj = add(config.text_dim, config.embed_dim);
    image_proj = add(config.image_dim, config.embed_dim);
    log_tau = off++;
    total = off;
  }
};

inline std::size_t parameter_count(const EncoderConfig& config) { return ParamLayout(config).total; }

/// Trainable state: encoder weights, text/image projections and log-temperature,
/// packed in one vector so optimizers and checkpoints treat them uniformly.
struct ModelState {
  EncoderConfig config;
  std::vector<double> params;

  ParamLayout layout() const { return ParamLayout(config); }
  double log_tau() const { return params.back(); }
  double tau() const { return std::exp(params.back()); }

  /// Glorot-uniform weights, zero biases, tau = 0.07.
  static ModelState initialize(const EncoderConfig& config, Rng& rng) {
    ModelState s;
    s.config = config;
    const ParamLayout layout(config);
    s.params.assign(layout.total, 0.0);
    auto fill = [&](const DenseSlot& slot) {
      const double limit = std::sqrt(6.0 / static_cast<double>(slot.in + slot.out));
      std::uniform_real_distribution<double> u(-limit, limit);
      for (std::size_t i = 0; i < slot.weight_count(); ++i) s.params[slot.offset + i] = u(rng);
    };
    for (const auto& l : layout.point_layers) fill(l);
    for (const auto& l : layout.head_layers) fill(l);
    fill(layout.text_proj);
    fill(layout.image_proj);
    s.params[layout.log_tau] = std::log(kTauInit);
    return s;
  }

  bool operator==(const ModelState&) const = default;
};

namespace detail {

// y = W x + b
inline void dense_forward(const DenseSlot& slot, std::span<const double> params, std::span<const double> x,
                          std::span<double> y) {
  const double* w = params.data() + slot.offset;
  const double* b = params.data() + slot.bias_offset();
  for (std::size_t o = 0; o < slot.out; ++o) {
    double acc = b[o];
    const double* row = w + o * slot.in;
    for (std::size_t i = 0; i < slot.in; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
}

// Accumulates dW, db and optionally returns dx = W^T dy.
inline void dense_backward(const DenseSlot& slot, std::span<const double> params, std::span<const double> x,
                           std::span<const double> dy, std::span<double> grad, std::span<double> dx) {
  const double* w = params.data() + slot.offset;
  double* gw = grad.data() + slot.offset;
  double* gb = grad.data() + slot.bias_offset();
  if (!dx.empty()) std::fill(dx.begin(), dx.end(), 0.0);
  for (std::size_t o = 0; o < slot.out; ++o) {
    const double g = dy[o];
    if (g == 0.0) continue;
    gb[o] += g;
    double* grow = gw + o * slot.in;
    const double* row = w + o * slot.in;
    for (std::size_t i = 0; i < slot.in; ++i) grow[i] += g * x[i];
    if (!dx.empty())
      for (std::size_t i = 0; i < slot.in; ++i) dx[i] += g * row[i];
  }
}

inline void relu(std::span<double> v) {
  for (double& x : v) x = x > 0.0 ? x : 0.0;
}

}  // namespace detail

/// Converts a point cloud into the N x C input feature matrix (xyz or xyzrgb).
inline Matrix point_features(const PointCloud& points, std::size_t channels) {
  require(channels == 3 || channels == 6, ErrorCode::invalid_argument, "input_channels must be 3 or 6");
  Matrix m(points.size(), channels);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Point& p = points[i];
    m(i, 0) = p.x;
    m(i, 1) = p.y;
    m(i, 2) = p.z;
    if (channels == 6) {
      m(i, 3) = p.r;
      m(i, 4) = p.g;
      m(i, 5) = p.b;
    }
  }
  return m;
}

/// PointNet-style encoder: a shared per-point MLP with ReLU, channel-wise max
/// pooling over points, then a head MLP whose last layer is linear.
class PointNetEncoder {
 public:
  /// Intermediate activations kept for the backward pass.
  struct Trace {
    Matrix input;
    std::vector<Matrix> point_acts;    // post-ReLU, one per per-point layer
    std::vector<std::size_t> argmax;   // winning point per pooled channel
    std::vector<Vector> head_inputs;   // input of each head layer
    Vector output;                     // raw f^P
  };

  static Trace forward(const Matrix& features, const ModelState& state) {
    const ParamLayout layout = state.layout();
    require(features.rows() >= 1, ErrorCode::invalid_argument, "cannot encode an empty point cloud");
    require(features.cols() == state.config.input_channels, ErrorCode::dim_mismatch,
            "point features have " + std::to_string(features.cols()) + " channels, encoder expects " +
                std::to_string(state.config.input_channels));
    const std::span<const double> params = state.params;
    Trace t;
    t.input = features;
    const Matrix* prev = &t.input;
    for (const DenseSlot& slot : layout.point_layers) {
      Matrix act(prev->rows(), slot.out);
      for (std::size_t p = 0; p < prev->rows(); ++p) {
        detail::dense_forward(slot, params, prev->row(p), act.row(p));
        detail::relu(act.row(p));
      }
      t.point_acts.push_back(std::move(act));
      prev = &t.point_acts.back();
    }

    Vector pooled(prev->cols());
    t.argmax.assign(prev->cols(), 0);
    for (std::size_t c = 0; c < prev->cols(); ++c) {
      double best = (*prev)(0, c);
      for (std::size_t p = 1; p < prev->rows(); ++p)
        if ((*prev)(p, c) > best) {
          best = (*prev)(p, c);
          t.argmax[c] = p;
        }
      pooled[c] = best;
    }

    Vector x = std::move(pooled);
    for (std::size_t l = 0; l < layout.head_layers.size(); ++l) {
      const DenseSlot& slot = layout.head_layers[l];
      Vector y(slot.out);
      detail::dense_forward(slot, params, x, y);
      if (l + 1 < layout.head_layers.size()) detail::relu(y);
      t.head_inputs.push_back(std::move(x));
      x = std::move(y);
    }
    t.output = std::move(x);
    require(all_finite(t.output), ErrorCode::non_finite, "encoder produced a non-finite feature");
    return t;
  }

  /// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(output).
  static void backward(const Trace& t, const ModelState& state, std::span<const double> grad_output,
                       std::span<double> grad) {
    const ParamLayout layout = state.layout();
    const std::span<const double> params = state.params;

    Vector g(grad_output.begin(), grad_output.end());
    for (std::size_t l = layout.head_layers.size(); l-- > 0;) {
      const DenseSlot& slot = layout.head_layers[l];
      if (l + 1 < layout.head_layers.size()) {
        // ReLU mask: the stored input of layer l+1 is this layer's activation.
        const Vector& act = t.head_inputs[l + 1];
        for (std::size_t o = 0; o < slot.out; ++o)
          if (act[o] <= 0.0) g[o] = 0.0;
      }
      Vector dx(slot.in);
      detail::dense_backward(slot, params, t.head_inputs[l], g, grad, dx);
      g = std::move(dx);
    }

    // Max pooling routes each channel's gradient to its winning point; only
    // those points need to be propagated through the per-point layers.
    std::vector<std::size_t> active(t.argmax);
    std::sort(active.begin(), active.end());
    active.erase(std::unique(active.begin(), active.end()), active.end());
    const std::size_t last_width = t.point_acts.back().cols();
    Matrix rows(active.size(), last_width);
    for (std::size_t c = 0; c < last_width; ++c) {
      const auto k = static_cast<std::size_t>(std::lower_bound(active.begin(), active.end(), t.argmax[c]) - active.begin());
      rows(k, c) += g[c];
    }

    for (std::size_t l = layout.point_layers.size(); l-- > 0;) {
      const DenseSlot& slot = layout.point_layers[l];
      const Matrix& out_act = t.point_acts[l];
      const Matrix& in_act = l == 0 ? t.input : t.point_acts[l - 1];
      Matrix next(active.size(), slot.in);
      for (std::size_t k = 0; k < active.size(); ++k) {
        auto dy = rows.row(k);
        auto act = out_act.row(active[k]);
        for (std::size_t o = 0; o < slot.out; ++o)
          if (act[o] <= 0.0) dy[o] = 0.0;
        detail::dense_backward(slot, params, in_act.row(active[k]), dy, grad,
                               l == 0 ? std::span<double>{} : next.row(k));
      }
      rows = std::move(next);
    }
  }
};

/// Raw shape feature f^P.
inline Vector encode(const Matrix& features, const ModelState& state) {
  return PointNetEncoder::forward(features, state).output;
}

inline Vector encode(const PointCloud& points, const ModelState& state) {
  return encode(point_features(points, state.config.input_channels), state);
}

/// Unit-norm shape embedding h^P.
inline Vector embed_shape(const PointCloud& points, const ModelState& state) {
  return normalized(encode(points, state), "shape feature");
}

enum class Modality { text, image };

inline const DenseSlot& projection_slot(const ParamLayout& layout, Modality m) {
  return m == Modality::text ? layout.text_proj : layout.image_proj;
}

/// Affine projection g(x) before normalization.
inline Vector project_raw(std::span<const double> raw, const ModelState& state, Modality m) {
  const ParamLayout layout = state.layout();
  const DenseSlot& slot = projection_slot(layout, m);
  require(raw.size() == slot.in, ErrorCode::dim_mismatch,
          std::string(m == Modality::text ? "text" : "image") + " vector has length " + std::to_string(raw.size()) +
              ", projection expects " + std::to_string(slot.in));
  Vector y(slot.out);
  detail::dense_forward(slot, state.params, raw, y);
  return y;
}

inline Vector project(std::span<const double> raw, const ModelState& state, Modality m) {
  return normalized(project_raw(raw, state, m), m == Modality::text ? "projected text" : "projected image");
}

inline Vector project_text(std::span<const double> raw, const ModelState& state) {
  return project(raw, state, Modality::text);
}

inline Vector project_image(std::span<const double> raw, const ModelState& state) {
  return project(raw, state, Modality::image);
}

/// Accumulates the projection's parameter gradient given d(loss)/d(g(x)).
inline void project_backward(std::span<const double> raw, const ModelState& state, Modality m,
                             std::span<const double> grad_out, std::span<double> grad) {
  const ParamLayout layout = state.layout();
  detail::dense_backward(projection_slot(layout, m), state.params, raw, grad_out, grad, {});
}

}  // namespace trialign

namespace trialign {

/// Unit shape embeddings for a list of records, one row per record.
inline Matrix embed_shapes(const std::vector<ShapeRecord>& records, const ModelState& state) {
  Matrix out(records.size(), state.config.embed_dim);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const Vector h = embed_shape(records[i].points, state);
    std::copy(h.begin(), h.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace trialign
