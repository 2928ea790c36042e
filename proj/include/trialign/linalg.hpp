// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "trialign/error.hpp"

namespace trialign {

using Vector = std::vector<double>;

/// Dense row-major matrix. Rows are exposed as spans so kernels can work on
/// either a whole matrix or a single embedding without copying.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix from_rows(const std::vector<Vector>& rows) {
    if (rows.empty()) return {};
    Matrix m(rows.size(), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      require(rows[i].size() == m.cols_, ErrorCode::dim_mismatch,
              "ragged rows in matrix construction");
      std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
    }
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

/// L2-normalizes `v`. A zero (or non-finite) norm is reported, never patched
/// with an epsilon.
inline Vector normalized(std::span<const double> v, const std::string& what = "vector") {
  const double n = norm(v);
  require(std::isfinite(n), ErrorCode::non_finite, what + " has non-finite norm");
  require(n > 0.0, ErrorCode::degenerate, what + " has zero norm");
  Vector out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return out;
}

/// Backward pass of h = x / |x|: given dL/dh, returns dL/dx = (g - (g.h) h) / |x|.
inline Vector normalize_backward(std::span<const double> unit, double raw_norm,
                                 std::span<const double> grad_unit) {
  const double gh = dot(grad_unit, unit);
  Vector out(unit.size());
  for (std::size_t i = 0; i < unit.size(); ++i)
    out[i] = (grad_unit[i] - gh * unit[i]) / raw_norm;
  return out;
}

}  // namespace trialign
