// SPDX-License-Identifier: Apache-2.0
#pragma once

// Independent reference computations for the test suites. Nothing here calls
// into the code path it is used to check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "trialign/trialign.hpp"

namespace trialign::oracle {

/// Straight scalar evaluation of the tri-modal loss: every term is
/// log(exp(s_ii / tau) / sum_j exp(s_ij / tau)) with no max-subtraction.
inline double naive_loss(const AlignedBatch& b, double tau, const NegativeMask& mask) {
  const std::size_t n = b.size();
  auto sim = [](const Matrix& A, std::size_t i, const Matrix& B, std::size_t j) {
    double s = 0.0;
    for (std::size_t k = 0; k < A.cols(); ++k) s += A(i, k) * B(j, k);
    return s;
  };
  auto valid = [&](std::size_t i) { return b.text_valid.empty() || b.text_valid[i]; };
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    // P -> T and T -> P
    if (valid(i)) {
      double num = std::exp(sim(b.HP, i, b.HT, i) / tau), den = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        if (j == i || (!mask(i, j) && valid(j))) den += std::exp(sim(b.HP, i, b.HT, j) / tau);
      total += std::log(num / den);
      num = std::exp(sim(b.HT, i, b.HP, i) / tau);
      den = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        if (j == i || !mask(i, j)) den += std::exp(sim(b.HT, i, b.HP, j) / tau);
      total += std::log(num / den);
    }
    // P -> I and I -> P
    double num = std::exp(sim(b.HP, i, b.HI, i) / tau), den = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j == i || !mask(i, j)) den += std::exp(sim(b.HP, i, b.HI, j) / tau);
    total += std::log(num / den);
    num = std::exp(sim(b.HI, i, b.HP, i) / tau);
    den = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j == i || !mask(i, j)) den += std::exp(sim(b.HI, i, b.HP, j) / tau);
    total += std::log(num / den);
  }
  return -total / (4.0 * static_cast<double>(n));
}

/// Fourth-order central difference of f at x along coordinate i.
inline double central_difference(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                                 std::size_t i, double h) {
  const double x0 = x[i];
  auto at = [&](double delta) {
    x[i] = x0 + delta;
    return f(x);
  };
  const double d = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
  return d;
}

/// |a - n| / max(|a|, |n|, floor). The floor keeps entries that are zero up
/// to round-off from dominating the ratio.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline Vector random_unit(std::size_t d, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vector v(d);
  double s = 0.0;
  for (double& x : v) {
    x = g(rng);
    s += x * x;
  }
  for (double& x : v) x /= std::sqrt(s);
  return v;
}

inline Matrix random_unit_rows(std::size_t n, std::size_t d, Rng& rng) {
  Matrix m(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const Vector v = random_unit(d, rng);
    std::copy(v.begin(), v.end(), m.row(i).begin());
  }
  return m;
}

inline AlignedBatch random_batch(std::size_t n, std::size_t d, Rng& rng) {
  AlignedBatch b;
  b.HP = random_unit_rows(n, d, rng);
  b.HT = random_unit_rows(n, d, rng);
  b.HI = random_unit_rows(n, d, rng);
  return b;
}

/// Full sort of every candidate; the library uses a partial selection.
inline NeighborTable brute_force_knn(const std::vector<std::string>& ids, const Matrix& emb, std::size_t k) {
  NeighborTable t;
  t.ids = ids;
  const std::size_t n = ids.size();
  for (std::size_t q = 0; q < n; ++q) {
    std::vector<Neighbor> all;
    for (std::size_t j = 0; j < n; ++j)
      if (j != q) all.push_back({j, dot(emb.row(q), emb.row(j))});
    std::sort(all.begin(), all.end(), [&](const Neighbor& a, const Neighbor& b) {
      if (a.similarity != b.similarity) return a.similarity > b.similarity;
      return ids[a.index] < ids[b.index];
    });
    all.resize(std::min(k, n - 1));
    t.rows.push_back(all);
  }
  return t;
}

/// Double-loop ranking: repeatedly pick the best remaining row.
inline std::vector<std::pair<std::size_t, double>> selection_rank(const std::vector<double>& scores, std::size_t k) {
  std::vector<bool> used(scores.size(), false);
  std::vector<std::pair<std::size_t, double>> out;
  for (std::size_t r = 0; r < std::min(k, scores.size()); ++r) {
    std::size_t best = scores.size();
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (!used[i] && (best == scores.size() || scores[i] > scores[best])) best = i;
    used[best] = true;
    out.emplace_back(best, scores[best]);
  }
  return out;
}

/// Distance of an encoder evaluation from its nearest non-differentiable
/// point: the smallest |pre-activation| of any ReLU unit that reaches the
/// output, the smallest gap between a pooled channel's best and runner-up
/// point, and the margin of channels that are dead at every point. Finite
/// differences are only meaningful when this exceeds the probe step.
inline double encoder_kink_margin(const Matrix& features, const ModelState& state) {
  const ParamLayout layout = state.layout();
  const auto& p = state.params;
  auto affine = [&](const DenseSlot& s, const std::vector<double>& x) {
    std::vector<double> y(s.out);
    for (std::size_t o = 0; o < s.out; ++o) {
      double acc = p[s.bias_offset() + o];
      for (std::size_t i = 0; i < s.in; ++i) acc += p[s.offset + o * s.in + i] * x[i];
      y[o] = acc;
    }
    return y;
  };
  const std::size_t n = features.rows();
  std::vector<std::vector<std::vector<double>>> pre(layout.point_layers.size());  // layer, point, unit
  std::vector<std::vector<double>> act(n);
  for (std::size_t q = 0; q < n; ++q) act[q].assign(features.row(q).begin(), features.row(q).end());
  for (std::size_t l = 0; l < layout.point_layers.size(); ++l)
    for (std::size_t q = 0; q < n; ++q) {
      pre[l].push_back(affine(layout.point_layers[l], act[q]));
      act[q] = pre[l].back();
      for (double& v : act[q]) v = std::max(v, 0.0);
    }
  double margin = INFINITY;
  const std::size_t width = layout.point_layers.back().out;
  std::vector<double> pooled(width);
  for (std::size_t c = 0; c < width; ++c) {
    std::size_t best = 0;
    for (std::size_t q = 1; q < n; ++q)
      if (pre.back()[q][c] > pre.back()[best][c]) best = q;
    double second = -INFINITY;
    for (std::size_t q = 0; q < n; ++q)
      if (q != best) second = std::max(second, pre.back()[q][c]);
    const double top = pre.back()[best][c];
    if (top > 0 && n > 1) margin = std::min(margin, top - std::max(second, 0.0));
    margin = std::min(margin, std::abs(top));
    if (top > 0)  // the winning point's whole path matters
      for (std::size_t l = 0; l < pre.size(); ++l)
        for (double v : pre[l][best]) margin = std::min(margin, std::abs(v));
    pooled[c] = std::max(top, 0.0);
  }
  std::vector<double> x = pooled;
  for (std::size_t l = 0; l + 1 < layout.head_layers.size(); ++l) {
    x = affine(layout.head_layers[l], x);
    for (double& v : x) {
      margin = std::min(margin, std::abs(v));
      v = std::max(v, 0.0);
    }
  }
  return margin;
}

}  // namespace trialign::oracle
