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

#ifndef MATCRUSH_TESTS_TESTUTIL_HPP_
#define MATCRUSH_TESTS_TESTUTIL_HPP_

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "matcrush/autodiff.hpp"
#include "matcrush/common.hpp"
#include "matcrush/rng.hpp"

namespace testutil {

using matcrush::Index;
using matcrush::Matrix;
using matcrush::Vector;

inline Matrix gaussian(std::uint64_t seed, Index n, Index m) {
  matcrush::Rng rng(seed);
  return rng.gaussian_matrix(n, m);
}

/// Orthonormal columns via QR of a seeded Gaussian matrix.
inline Matrix orthonormal(std::uint64_t seed, Index n, Index k) {
  const Matrix g = gaussian(seed, n, k);
  Eigen::HouseholderQR<Matrix> qr(g);
  return qr.householderQ() * Matrix::Identity(n, k);
}

/// M = U0 diag(sigma) V0^T with seeded orthonormal factors.
inline Matrix planted_spectrum(std::uint64_t seed, Index n, Index m, const Vector& sigma) {
  const Matrix u0 = orthonormal(matcrush::derive_seed(seed, 1), n, sigma.size());
  const Matrix v0 = orthonormal(matcrush::derive_seed(seed, 2), m, sigma.size());
  return u0 * sigma.asDiagonal() * v0.transpose();
}

inline Vector geometric_sigma(Index count, double top, double ratio) {
  Vector s(count);
  double v = top;
  for (Index i = 0; i < count; ++i) {
    s(i) = v;
    v *= ratio;
  }
  return s;
}

inline Matrix zero_column_means(Matrix m) {
  const Eigen::RowVectorXd mu = m.colwise().mean();
  m.rowwise() -= mu;
  return m;
}

/// Optimal rank-k rmse via a dense SVD, independent of the library's
/// randomized path.
inline double dense_svd_rank_rmse(const Matrix& m, Index k) {
  Eigen::JacobiSVD<Matrix> svd(m);
  const Vector s = svd.singularValues();
  double residual = 0.0;
  for (Index i = k; i < s.size(); ++i) residual += s(i) * s(i);
  return std::sqrt(residual / static_cast<double>(m.size()));
}

inline Vector dense_singular_values(const Matrix& m) {
  Eigen::JacobiSVD<Matrix> svd(m);
  return svd.singularValues();
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("matcrush_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

// ---------------------------------------------------------------------------
// Extended-precision finite-difference oracle for autoencoder gradients.
// An independent reimplementation of forward + loss in long double: central
// differences at h = 1e-6 would otherwise sit on the f64 rounding floor for
// parameters with near-zero gradients.
// ---------------------------------------------------------------------------

using LMatrix = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
using LVector = Eigen::Matrix<long double, Eigen::Dynamic, 1>;

struct LdLayer {
  LMatrix w;
  LVector b;
  matcrush::ad::Activation act;
};

struct LdAeParams {
  std::vector<LdLayer> encoder, decoder;

  static LdAeParams from(const matcrush::ad::AeParams& p) {
    LdAeParams out;
    for (const auto& l : p.encoder)
      out.encoder.push_back({l.w.cast<long double>(), l.b.cast<long double>(), l.act});
    for (const auto& l : p.decoder)
      out.decoder.push_back({l.w.cast<long double>(), l.b.cast<long double>(), l.act});
    return out;
  }
};

inline long double ld_ae_loss(const LdAeParams& p, const matcrush::ad::AeArch& arch,
                              const matcrush::ad::LossSpec& spec, const LMatrix& x) {
  LMatrix h = x;
  auto run = [&](const std::vector<LdLayer>& layers) {
    for (const auto& l : layers) {
      h = (h * l.w.transpose()).rowwise() + l.b.transpose();
      if (l.act == matcrush::ad::Activation::leaky_relu)
        h = h.unaryExpr([](long double v) { return v > 0.0L ? v : 0.01L * v; });
      else if (l.act == matcrush::ad::Activation::tanh)
        h = h.unaryExpr([](long double v) { return std::tanh(v); });
    }
  };
  run(p.encoder);
  run(p.decoder);

  const Index b = x.rows();
  const Index m = x.cols();
  if (arch.preserve_norm) {
    for (Index i = 0; i < b; ++i) {
      const long double tgt = x.row(i).norm();
      const long double r = h.row(i).norm();
      if (tgt >= 1e-12L && r >= 1e-12L) h.row(i) *= tgt / r;
    }
  }

  LVector w(b);
  if (spec.row_weights)
    w = spec.row_weights->cast<long double>();
  else
    w.setOnes();
  if (spec.batch_norm_weights) {
    if (w.minCoeff() == w.maxCoeff()) {
      if (w(0) > 0.0L) w.setOnes();
    } else {
      const long double mean = w.mean();
      if (mean > 0.0L) w /= mean;
    }
  }

  long double sum_sq = 0.0L, sum_cd = 0.0L;
  for (Index i = 0; i < b; ++i) {
    sum_sq += w(i) * (h.row(i) - x.row(i)).squaredNorm();
    const long double nx = x.row(i).norm();
    const long double nr = h.row(i).norm();
    if (nx >= 1e-12L && nr >= 1e-12L)
      sum_cd += w(i) * (1.0L - x.row(i).dot(h.row(i)) / (nx * nr));
  }
  const long double wrmse =
      std::sqrt(sum_sq / (static_cast<long double>(b) * static_cast<long double>(m)));
  const long double wcd = sum_cd / static_cast<long double>(b);
  const long double beta = static_cast<long double>(spec.beta);
  return (1.0L - beta) * wrmse + beta * wcd;
}

/// Max relative error of analytic gradients vs the long-double central
/// difference oracle, using the |g| + 1e-8 denominator at h = 1e-6.
inline double max_fd_relative_error(const matcrush::ad::AeParams& params,
                                    const matcrush::ad::AeArch& arch,
                                    const matcrush::ad::LossSpec& spec, const Matrix& x,
                                    long double h = 1e-6L) {
  const matcrush::ad::AeParams grads = matcrush::ad::backward(params, arch, spec, x);
  LdAeParams probe = LdAeParams::from(params);
  const LMatrix lx = x.cast<long double>();

  double worst = 0.0;
  auto check = [&](long double& theta, double analytic) {
    const long double orig = theta;
    theta = orig + h;
    const long double up = ld_ae_loss(probe, arch, spec, lx);
    theta = orig - h;
    const long double down = ld_ae_loss(probe, arch, spec, lx);
    theta = orig;
    const double fd = static_cast<double>((up - down) / (2.0L * h));
    const double rel = std::abs(analytic - fd) / (std::abs(analytic) + 1e-8);
    worst = std::max(worst, rel);
  };

  for (std::size_t li = 0; li < probe.encoder.size(); ++li) {
    for (Index i = 0; i < probe.encoder[li].w.rows(); ++i)
      for (Index j = 0; j < probe.encoder[li].w.cols(); ++j)
        check(probe.encoder[li].w(i, j), grads.encoder[li].w(i, j));
    for (Index i = 0; i < probe.encoder[li].b.size(); ++i)
      check(probe.encoder[li].b(i), grads.encoder[li].b(i));
  }
  for (std::size_t li = 0; li < probe.decoder.size(); ++li) {
    for (Index i = 0; i < probe.decoder[li].w.rows(); ++i)
      for (Index j = 0; j < probe.decoder[li].w.cols(); ++j)
        check(probe.decoder[li].w(i, j), grads.decoder[li].w(i, j));
    for (Index i = 0; i < probe.decoder[li].b.size(); ++i)
      check(probe.decoder[li].b(i), grads.decoder[li].b(i));
  }
  return worst;
}

inline std::vector<matcrush::ad::AeArch> ae_arch_variants(Index m, Index k) {
  using matcrush::ad::Activation;
  using matcrush::ad::AeArch;
  std::vector<AeArch> out;
  out.push_back(AeArch::linear(m, k, false));
  out.push_back(AeArch::linear(m, k, true));
  out.push_back(AeArch::nonlinear(m, k, {12}, Activation::leaky_relu, false));
  out.push_back(AeArch::nonlinear(m, k, {12}, Activation::tanh, true));
  out.push_back(AeArch::nonlinear(m, k, {12, 10}, Activation::leaky_relu, true));
  out.push_back(AeArch::nonlinear(m, k, {10, 12}, Activation::tanh, false));
  return out;
}

}  // namespace testutil

#endif  // MATCRUSH_TESTS_TESTUTIL_HPP_
