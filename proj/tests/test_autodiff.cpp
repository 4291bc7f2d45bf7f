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

#include "matcrush/autodiff.hpp"

#include <gtest/gtest.h>

#include "matcrush/linalg.hpp"
#include "testutil.hpp"

namespace {

using matcrush::DivergenceError;
using matcrush::Index;
using matcrush::Matrix;
using matcrush::Vector;
namespace ad = matcrush::ad;

TEST(Backward, FiniteDifferenceAllVariants) {
  const Index n = 16, m = 8, k = 3;
  const Matrix x = testutil::gaussian(2024, n, m);
  Vector weights(n);
  {
    matcrush::Rng rng(5);
    for (Index i = 0; i < n; ++i) weights(i) = 0.2 + rng.uniform01() * 3.0;
  }
  for (const auto& arch : testutil::ae_arch_variants(m, k)) {
    for (const double beta : {0.0, 0.5, 1.0}) {
      for (const bool use_weights : {false, true}) {
        ad::LossSpec spec;
        spec.beta = beta;
        if (use_weights) {
          spec.row_weights = weights;
          spec.batch_norm_weights = true;
        }
        const ad::AeParams params = ad::init_ae_params(arch, 9);
        const double err = testutil::max_fd_relative_error(params, arch, spec, x);
        EXPECT_LE(err, 1e-5) << "beta=" << beta << " weights=" << use_weights
                             << " preserve_norm=" << arch.preserve_norm
                             << " enc_layers=" << arch.encoder.size();
      }
    }
  }
}

TEST(LossEval, SpecExamples) {
  ad::LossSpec spec;
  spec.beta = 0.0;
  const Matrix x = testutil::gaussian(3, 4, 4);
  EXPECT_EQ(ad::loss_eval(spec, x, x), 0.0);

  spec.beta = 1.0;
  Matrix a(1, 2), b(1, 2);
  a << 1, 0;
  b << 0, 1;
  EXPECT_NEAR(ad::loss_eval(spec, a, b), 1.0, 1e-12);

  spec.beta = 0.5;
  Matrix c(1, 4), d(1, 4);
  c << 0, 0, 0, 2;
  d << 0, 0, 0, 1;
  // rmse = sqrt(1/4) = 0.5, cosine distance = 0.
  EXPECT_NEAR(ad::loss_eval(spec, c, d), 0.25, 1e-12);
}

TEST(LossEval, MatchesLinalgMetricsAtMeanOneWeights) {
  const Matrix x = testutil::gaussian(17, 12, 6);
  const Matrix r = testutil::gaussian(18, 12, 6);
  ad::LossSpec spec;
  spec.beta = 0.35;
  const double expected = (1.0 - spec.beta) * matcrush::linalg::rmse(x, r) +
                          spec.beta * matcrush::linalg::mean_cosine_distance(x, r);
  EXPECT_NEAR(ad::loss_eval(spec, x, r), expected, 1e-12);
}

TEST(AeForward, IdentityComposition) {
  const Index m = 6;
  const ad::AeArch arch = ad::AeArch::linear(m, m);
  ad::AeParams p;
  p.encoder.push_back({Matrix::Identity(m, m), Vector::Zero(m), ad::Activation::identity});
  p.decoder.push_back({Matrix::Identity(m, m), Vector::Zero(m), ad::Activation::identity});
  const Matrix x = testutil::gaussian(1, 10, m);
  const auto fwd = ad::ae_forward(p, arch, x);
  EXPECT_EQ((fwd.recon - x).cwiseAbs().maxCoeff(), 0.0);
}

TEST(AeForward, PreserveNormMatchesInputNorms) {
  const ad::AeArch arch = ad::AeArch::nonlinear(8, 3, {6}, ad::Activation::tanh, true);
  const ad::AeParams p = ad::init_ae_params(arch, 2);
  const Matrix x = testutil::gaussian(4, 20, 8);
  const auto fwd = ad::ae_forward(p, arch, x);
  for (Index i = 0; i < x.rows(); ++i) {
    const double nx = x.row(i).norm();
    if (nx >= 1e-12) EXPECT_NEAR(fwd.recon.row(i).norm(), nx, 1e-9);
  }
}

TEST(AeForward, ZeroDecoderGivesZeroRecon) {
  const Index m = 5, k = 2;
  const ad::AeArch arch = ad::AeArch::linear(m, k);
  ad::AeParams p = ad::init_ae_params(arch, 3);
  p.decoder[0].w.setZero();
  p.decoder[0].b.setZero();
  const Matrix x = testutil::gaussian(6, 9, m);
  EXPECT_EQ(ad::ae_forward(p, arch, x).recon.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Backward, ZeroGradientAtSvdMinimum) {
  // Linear AE at the SVD solution on a column-centered matrix is a critical
  // point; biases see zero gradient because residual column sums vanish.
  const Index n = 16, m = 8, k = 3;
  const Matrix x = testutil::zero_column_means(testutil::gaussian(31, n, m));
  const auto svd = matcrush::linalg::truncated_svd(x, k, 4, 0);

  const ad::AeArch arch = ad::AeArch::linear(m, k);
  ad::AeParams p;
  p.encoder.push_back({svd.v.transpose(), Vector::Zero(k), ad::Activation::identity});
  p.decoder.push_back({svd.v, Vector::Zero(m), ad::Activation::identity});

  ad::LossSpec spec;
  const ad::AeParams g = ad::backward(p, arch, spec, x);
  double max_abs = 0.0;
  max_abs = std::max(max_abs, g.encoder[0].w.cwiseAbs().maxCoeff());
  max_abs = std::max(max_abs, g.encoder[0].b.cwiseAbs().maxCoeff());
  max_abs = std::max(max_abs, g.decoder[0].w.cwiseAbs().maxCoeff());
  max_abs = std::max(max_abs, g.decoder[0].b.cwiseAbs().maxCoeff());
  EXPECT_LE(max_abs, 1e-8);
}

TEST(Backward, DuplicatedLossDoublesGradients) {
  const ad::AeArch arch = ad::AeArch::linear(6, 2);
  const ad::AeParams params = ad::init_ae_params(arch, 7);
  const Matrix x = testutil::gaussian(8, 10, 6);
  const Vector w = Vector::Ones(10);

  auto run = [&](bool duplicated) {
    ad::ParamStore store = ad::detail::make_store(params);
    ad::Tape tape(&store);
    auto fwd = ad::detail::ae_forward_tape(tape, store, arch, x);
    ad::Tape::Var xc = tape.constant(x);
    ad::Tape::Var loss = tape.recon_loss(xc, fwd.recon, w, 0.5);
    if (duplicated) loss = tape.add(loss, tape.recon_loss(xc, fwd.recon, w, 0.5));
    tape.backward(loss);
    return store.entries[0].grad;  // enc.0.w
  };
  const Matrix g1 = run(false);
  const Matrix g2 = run(true);
  EXPECT_LE((g2 - 2.0 * g1).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Tape, ForwardMatchesPlainPath) {
  for (const auto& arch : testutil::ae_arch_variants(8, 3)) {
    const ad::AeParams params = ad::init_ae_params(arch, 11);
    const Matrix x = testutil::gaussian(12, 14, 8);
    ad::ParamStore store = ad::detail::make_store(params);
    ad::Tape tape(&store);
    auto fwd = ad::detail::ae_forward_tape(tape, store, arch, x);
    const auto plain = ad::ae_forward(params, arch, x);
    EXPECT_EQ((tape.val(fwd.recon) - plain.recon).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ((tape.val(fwd.latent) - plain.latent).cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Train, RankOneExactlyRepresentable) {
  matcrush::Rng rng(13);
  const Matrix u = rng.gaussian_matrix(32, 1);
  const Matrix v = rng.gaussian_matrix(1, 16);
  const Matrix x = u * v;

  ad::TrainConfig cfg;
  cfg.learning_rate = 5e-4;
  cfg.max_steps = 20000;
  cfg.eval_every = 20;  // the rmse floor is noisy; track bests densely
  cfg.patience = 200;
  cfg.seed = 1;
  const auto result = ad::train(x, ad::AeArch::linear(16, 1), ad::LossSpec{}, cfg);
  EXPECT_LE(result.report.best_loss, 1e-4);
}

TEST(Train, FullLatentReachesIdentity) {
  const Matrix x = testutil::gaussian(14, 24, 8);
  ad::TrainConfig cfg;
  cfg.learning_rate = 1e-4;
  cfg.max_steps = 20000;
  cfg.eval_every = 10;
  cfg.patience = 400;
  cfg.seed = 2;
  const auto result = ad::train(x, ad::AeArch::linear(8, 8), ad::LossSpec{}, cfg);
  EXPECT_LE(result.report.best_loss, 1e-4);
}

TEST(Train, DeterministicReports) {
  const Matrix x = testutil::gaussian(15, 40, 10);
  ad::TrainConfig cfg;
  cfg.max_steps = 600;
  cfg.batch_size = 16;
  cfg.seed = 77;
  const auto a = ad::train(x, ad::AeArch::linear(10, 2), ad::LossSpec{}, cfg);
  const auto b = ad::train(x, ad::AeArch::linear(10, 2), ad::LossSpec{}, cfg);
  ASSERT_EQ(a.report.loss_curve.size(), b.report.loss_curve.size());
  for (std::size_t i = 0; i < a.report.loss_curve.size(); ++i)
    EXPECT_EQ(a.report.loss_curve[i], b.report.loss_curve[i]);
  EXPECT_EQ(a.report.steps_run, b.report.steps_run);
  EXPECT_EQ(a.report.to_json(), b.report.to_json());
}

TEST(Train, BestLossMonotoneInMaxSteps) {
  const Matrix x = testutil::gaussian(16, 40, 10);
  ad::LossSpec spec;
  spec.beta = 0.25;
  double prev = std::numeric_limits<double>::infinity();
  for (const std::int64_t steps : {200, 600, 1800}) {
    ad::TrainConfig cfg;
    cfg.max_steps = steps;
    cfg.batch_size = 16;
    cfg.seed = 5;
    cfg.patience = 1000000;  // disable early stop so prefixes align
    const auto r = ad::train(x, ad::AeArch::linear(10, 3), spec, cfg);
    EXPECT_LE(r.report.best_loss, prev + 1e-15);
    prev = r.report.best_loss;
  }
}

TEST(Train, DivergenceNamesStep) {
  Matrix x = Matrix::Constant(8, 4, 1e200);
  ad::TrainConfig cfg;
  cfg.max_steps = 10;
  try {
    ad::train(x, ad::AeArch::linear(4, 2), ad::LossSpec{}, cfg);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(Train, ReportJsonOmitsWallTime) {
  const Matrix x = testutil::gaussian(19, 12, 6);
  ad::TrainConfig cfg;
  cfg.max_steps = 50;
  const auto r = ad::train(x, ad::AeArch::linear(6, 2), ad::LossSpec{}, cfg);
  const auto j = r.report.to_json();
  EXPECT_TRUE(j.contains("loss_curve"));
  EXPECT_TRUE(j.contains("seed"));
  EXPECT_TRUE(j.contains("config"));
  EXPECT_FALSE(j.dump().find("wall") != std::string::npos);
  EXPECT_GT(r.report.wall_time_sec, 0.0);
}

}  // namespace
