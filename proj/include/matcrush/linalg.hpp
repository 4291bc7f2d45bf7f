// Copyright 2026 The Matcrush Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef MATCRUSH_LINALG_HPP_
#define MATCRUSH_LINALG_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>

#include <Eigen/Dense>
#include <Eigen/QR>
#include <Eigen/SVD>

#include "matcrush/common.hpp"
#include "matcrush/rng.hpp"

namespace matcrush::linalg {

inline constexpr double kZeroNormEps = 1e-12;

struct TruncatedSvd {
  Matrix u;  // n x k, orthonormal columns
  Vector s;  // k, non-increasing, non-negative
  Matrix v;  // m x k, orthonormal columns

  Matrix reconstruct() const { return u * s.asDiagonal() * v.transpose(); }
};

namespace detail {

inline Matrix thin_q(const Matrix& y) {
  Eigen::HouseholderQR<Matrix> qr(y);
  return qr.householderQ() * Matrix::Identity(y.rows(), y.cols());
}

}  // namespace detail

/// Randomized range-finder truncated SVD (oversampling 10, subspace power
/// iteration, seeded Gaussian test matrix). Deterministic given
/// (matrix, k, power_iters, seed).
inline TruncatedSvd truncated_svd(const Matrix& matrix, Index k, int power_iters = 4,
                                  std::uint64_t seed = 0) {
  const Index n = matrix.rows();
  const Index m = matrix.cols();
  const Index rank_cap = std::min(n, m);
  if (k < 1 || k > rank_cap)
    throw ShapeError("truncated_svd: k out of range [1, min(n,m)]");
  if (!all_finite(matrix)) throw ShapeError("truncated_svd: non-finite input");

  constexpr Index kOversampling = 10;
  const Index l = std::min(rank_cap, k + kOversampling);

  Rng rng(seed);
  const Matrix omega = rng.gaussian_matrix(m, l);
  Matrix q = detail::thin_q(matrix * omega);
  for (int it = 0; it < power_iters; ++it) {
    const Matrix z = detail::thin_q(matrix.transpose() * q);
    q = detail::thin_q(matrix * z);
  }

  const Matrix b = q.transpose() * matrix;  // l x m
  Eigen::JacobiSVD<Matrix> svd(b, Eigen::ComputeThinU | Eigen::ComputeThinV);

  TruncatedSvd out;
  out.u = q * svd.matrixU().leftCols(k);
  out.s = svd.singularValues().head(k);
  out.v = svd.matrixV().leftCols(k);

  // Sign convention: the largest-magnitude element of each U column is made
  // non-negative so seeded factor comparisons are stable.
  for (Index j = 0; j < k; ++j) {
    Index imax = 0;
    out.u.col(j).cwiseAbs().maxCoeff(&imax);
    if (out.u(imax, j) < 0.0) {
      out.u.col(j) = -out.u.col(j);
      out.v.col(j) = -out.v.col(j);
    }
  }
  return out;
}

/// Kronecker product: out[i*r+u][j*s+v] = b[i][j] * c[u][v].
inline Matrix kron(const Matrix& b, const Matrix& c) {
  if (!all_finite(b) || !all_finite(c)) throw ShapeError("kron: non-finite input");
  Matrix out(b.rows() * c.rows(), b.cols() * c.cols());
  for (Index i = 0; i < b.rows(); ++i)
    for (Index j = 0; j < b.cols(); ++j)
      out.block(i * c.rows(), j * c.cols(), c.rows(), c.cols()) = b(i, j) * c;
  return out;
}

inline double rmse(const Matrix& x, const Matrix& x_hat) {
  if (x.rows() != x_hat.rows() || x.cols() != x_hat.cols())
    throw ShapeError("rmse: shape mismatch");
  const double n = static_cast<double>(x.size());
  return std::sqrt((x - x_hat).squaredNorm() / n);
}

/// Weighted mean over rows of (1 - cosine(X_i, X~_i)). Rows where either
/// norm is below 1e-12 contribute 0 (no direction to preserve). Weights, if
/// given, are normalized to sum 1.
inline double mean_cosine_distance(const Matrix& x, const Matrix& x_hat,
                                   const Vector* row_weights = nullptr) {
  if (x.rows() != x_hat.rows() || x.cols() != x_hat.cols())
    throw ShapeError("mean_cosine_distance: shape mismatch");
  const Index n = x.rows();
  double weight_sum = 0.0;
  if (row_weights != nullptr) {
    if (row_weights->size() != n)
      throw ShapeError("mean_cosine_distance: weight length mismatch");
    if (row_weights->minCoeff() < 0.0)
      throw ShapeError("mean_cosine_distance: negative weight");
    weight_sum = row_weights->sum();
    if (weight_sum <= 0.0) throw ShapeError("mean_cosine_distance: all-zero weights");
  }

  double acc = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double nx = x.row(i).norm();
    const double nr = x_hat.row(i).norm();
    double dist = 0.0;
    if (nx >= kZeroNormEps && nr >= kZeroNormEps)
      dist = 1.0 - x.row(i).dot(x_hat.row(i)) / (nx * nr);
    const double w = row_weights != nullptr ? (*row_weights)(i) / weight_sum
                                            : 1.0 / static_cast<double>(n);
    acc += w * dist;
  }
  return acc;
}

}  // namespace matcrush::linalg

#endif  // MATCRUSH_LINALG_HPP_
