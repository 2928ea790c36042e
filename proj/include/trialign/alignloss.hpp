// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "trialign/error.hpp"
#include "trialign/linalg.hpp"

namespace trialign {

/// One batch of unit-norm embeddings, row i of each matrix belonging to shape i.
///
/// `text_valid` marks shapes that have a text sample; an empty vector means
/// all rows are valid. Rows of HT for text-less shapes are ignored.
struct AlignedBatch {
  Matrix HP, HT, HI;
  std::vector<bool> text_valid;

  std::size_t size() const { return HP.rows(); }
  bool has_text(std::size_t i) const { return text_valid.empty() || text_valid[i]; }
};

/// Directional exclusion: excluded(i, j) removes j from every softmax
/// denominator anchored at i. The diagonal is always false.
class NegativeMask {
 public:
  NegativeMask() = default;
  explicit NegativeMask(std::size_t n) : n_(n), bits_(n * n, 0) {}

  std::size_t size() const { return n_; }
  bool operator()(std::size_t i, std::size_t j) const { return bits_[i * n_ + j] != 0; }

  void exclude(std::size_t i, std::size_t j, bool value = true) {
    if (i == j) return;
    bits_[i * n_ + j] = value ? 1 : 0;
  }

  std::size_t count() const {
    std::size_t c = 0;
    for (auto b : bits_) c += b;
    return c;
  }

  /// excluded(i, j) || excluded(j, i).
  NegativeMask symmetrized() const {
    NegativeMask m(n_);
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = 0; j < n_; ++j)
        if ((*this)(i, j) || (*this)(j, i)) m.exclude(i, j);
    return m;
  }

  bool operator==(const NegativeMask&) const = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// Entry (i, j) = HA_i . HB_j / tau.
inline Matrix batch_similarity(const Matrix& HA, const Matrix& HB, double tau) {
  require(HA.cols() == HB.cols(), ErrorCode::dim_mismatch,
          "similarity inputs have dims " + std::to_string(HA.cols()) + " and " + std::to_string(HB.cols()));
  require(tau > 0.0, ErrorCode::invalid_argument, "temperature must be positive");
  Matrix out(HA.rows(), HB.rows());
  for (std::size_t i = 0; i < HA.rows(); ++i)
    for (std::size_t j = 0; j < HB.rows(); ++j) out(i, j) = dot(HA.row(i), HB.row(j)) / tau;
  return out;
}

struct LossGrad {
  double loss = 0.0;
  Matrix dHP, dHT, dHI;
  double d_log_tau = 0.0;
};

/// The four contrastive directions, in the order P->T, T->P, P->I, I->P.
enum class Direction { shape_to_text, text_to_shape, shape_to_image, image_to_shape };
inline constexpr std::array<Direction, 4> kDirections = {Direction::shape_to_text, Direction::text_to_shape,
                                                         Direction::shape_to_image, Direction::image_to_shape};

namespace detail {

inline void check_batch(const AlignedBatch& batch, double tau, const NegativeMask& mask) {
  const std::size_t n = batch.size();
  require(n >= 1, ErrorCode::invalid_argument, "batch is empty");
  require(batch.HT.rows() == n && batch.HI.rows() == n, ErrorCode::dim_mismatch, "batch modalities differ in size");
  require(batch.HT.cols() == batch.HP.cols() && batch.HI.cols() == batch.HP.cols(), ErrorCode::dim_mismatch,
          "batch modalities differ in embedding dim");
  require(batch.text_valid.empty() || batch.text_valid.size() == n, ErrorCode::dim_mismatch,
          "text_valid length differs from batch size");
  require(mask.size() == n, ErrorCode::dim_mismatch, "mask size differs from batch size");
  require(tau > 0.0 && std::isfinite(tau), ErrorCode::invalid_argument, "temperature must be positive");
  auto check_unit = [](const Matrix& m, std::size_t i, const char* what) {
    const double len = norm(m.row(i));
    require(std::abs(len - 1.0) <= 1e-6, ErrorCode::invalid_argument,
            std::string(what) + " row " + std::to_string(i) + " is not unit-norm (|h| = " + std::to_string(len) + ")");
  };
  for (std::size_t i = 0; i < n; ++i) {
    check_unit(batch.HP, i, "shape");
    check_unit(batch.HI, i, "image");
    if (batch.has_text(i)) check_unit(batch.HT, i, "text");
  }
}

// Shared forward/backward over all four directions. Per-anchor terms are
// written to `terms` (4 x n, zero for dropped anchors) when non-null.
inline LossGrad evaluate(const AlignedBatch& batch, double tau, const NegativeMask& mask, bool with_grad,
                         Matrix* terms) {
  check_batch(batch, tau, mask);
  const std::size_t n = batch.size();
  const std::size_t d = batch.HP.cols();
  LossGrad out;
  if (with_grad) {
    out.dHP = Matrix(n, d);
    out.dHT = Matrix(n, d);
    out.dHI = Matrix(n, d);
  }
  if (terms) *terms = Matrix(4, n);
  const double scale = 1.0 / (4.0 * static_cast<double>(n));

  std::vector<double> logits(n), weights(n);
  std::vector<bool> in_set(n);
  for (std::size_t dir = 0; dir < kDirections.size(); ++dir) {
    const Direction direction = kDirections[dir];
    const bool text = direction == Direction::shape_to_text || direction == Direction::text_to_shape;
    const bool shape_anchored = direction == Direction::shape_to_text || direction == Direction::shape_to_image;
    const Matrix& other = text ? batch.HT : batch.HI;
    const Matrix& A = shape_anchored ? batch.HP : other;
    const Matrix& B = shape_anchored ? other : batch.HP;
    Matrix* dA = with_grad ? (shape_anchored ? &out.dHP : (text ? &out.dHT : &out.dHI)) : nullptr;
    Matrix* dB = with_grad ? (shape_anchored ? (text ? &out.dHT : &out.dHI) : &out.dHP) : nullptr;
    // Text-less shapes contribute no text anchor and no text candidate.
    const bool candidate_needs_text = text && shape_anchored;

    for (std::size_t i = 0; i < n; ++i) {
      if (text && !batch.has_text(i)) continue;
      double max_logit = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) {
        in_set[j] = j == i || (!mask(i, j) && !(candidate_needs_text && !batch.has_text(j)));
        if (!in_set[j]) continue;
        logits[j] = dot(A.row(i), B.row(j)) / tau;
        max_logit = std::max(max_logit, logits[j]);
      }
      double denom = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        if (in_set[j]) {
          weights[j] = std::exp(logits[j] - max_logit);
          denom += weights[j];
        }
      const double log_denom = max_logit + std::log(denom);
      const double term = log_denom - logits[i];
      out.loss += term;
      if (terms) (*terms)(dir, i) = term;
      if (!with_grad) continue;

      for (std::size_t j = 0; j < n; ++j) {
        if (!in_set[j]) continue;
        const double coeff = (weights[j] / denom - (j == i ? 1.0 : 0.0)) * scale;
        if (coeff == 0.0) continue;
        auto a = A.row(i);
        auto b = B.row(j);
        auto ga = dA->row(i);
        auto gb = dB->row(j);
        for (std::size_t k = 0; k < d; ++k) {
          ga[k] += coeff * b[k] / tau;
          gb[k] += coeff * a[k] / tau;
        }
        out.d_log_tau -= coeff * logits[j];
      }
    }
  }
  out.loss *= scale;
  require(std::isfinite(out.loss), ErrorCode::non_finite, "contrastive loss is not finite");
  return out;
}

}  // namespace detail

/// Tri-modal contrastive loss averaged over 4n terms.
inline double contrastive_loss(const AlignedBatch& batch, double tau, const NegativeMask& mask) {
  return detail::evaluate(batch, tau, mask, false, nullptr).loss;
}

inline double contrastive_loss(const AlignedBatch& batch, double tau) {
  return contrastive_loss(batch, tau, NegativeMask(batch.size()));
}

/// Loss together with its gradient w.r.t. the unit-norm rows and log(tau).
inline LossGrad contrastive_loss_grad(const AlignedBatch& batch, double tau, const NegativeMask& mask) {
  return detail::evaluate(batch, tau, mask, true, nullptr);
}

/// Unscaled per-anchor terms, 4 x n in direction order; dropped anchors are 0.
inline Matrix contrastive_anchor_terms(const AlignedBatch& batch, double tau, const NegativeMask& mask) {
  Matrix terms;
  detail::evaluate(batch, tau, mask, false, &terms);
  return terms;
}

}  // namespace trialign
