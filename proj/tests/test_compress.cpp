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

#include "matcrush/compress.hpp"

#include <gtest/gtest.h>

#include "testutil.hpp"

namespace {

using matcrush::Index;
using matcrush::InfeasibleError;
using matcrush::Matrix;
using matcrush::ShapeError;
using matcrush::Vector;
namespace ad = matcrush::ad;
namespace compress = matcrush::compress;
using compress::ModuleGroup;

ModuleGroup single(const std::string& name, Matrix m,
                   compress::Mode mode = compress::Mode::separated) {
  ModuleGroup g;
  g.mode = mode;
  g.members.push_back({name, std::move(m)});
  return g;
}

// Independent oracle: integer search over k with the same accounting rule.
Index plan_oracle(std::size_t n, std::size_t m, double target_cr,
                  const ad::AeArch& arch) {
  Index best = 0;
  for (Index k = 1; k <= static_cast<Index>(n * m); ++k) {
    std::size_t params = n * static_cast<std::size_t>(k) +
                         compress::decoder_param_count_at(arch, k) +
                         (arch.preserve_norm ? n : 0);
    const double cr = static_cast<double>(n * m) / static_cast<double>(params);
    if (cr >= target_cr)
      best = k;
    else
      break;
  }
  return best;
}

TEST(PlanLatentDim, SpecThousandByHundred) {
  const ModuleGroup g = single("w", Matrix::Zero(1000, 100));
  const ad::AeArch arch = ad::AeArch::linear(100, 1);
  const auto plan = compress::plan_latent_dim(g, 5.0, arch);
  EXPECT_EQ(plan.k, 18);
  EXPECT_EQ(plan.k, plan_oracle(1000, 100, 5.0, arch));
  EXPECT_DOUBLE_EQ(plan.achieved_cr, 100000.0 / 19900.0);
  EXPECT_GE(plan.achieved_cr, 5.0);
}

TEST(PlanLatentDim, ConcatenatedTwelveLayers) {
  ModuleGroup g;
  g.mode = compress::Mode::concatenated;
  for (int i = 0; i < 12; ++i)
    g.members.push_back({"layer." + std::to_string(i) + ".key", Matrix::Zero(768, 768)});
  const ad::AeArch arch = ad::AeArch::linear(768, 1);
  const auto plan = compress::plan_latent_dim(g, 10.0, arch);
  EXPECT_EQ(plan.k, plan_oracle(9216, 768, 10.0, arch));
  EXPECT_GE(plan.achieved_cr, 10.0);
}

TEST(PlanLatentDim, TinyTargetGivesLargestFeasible) {
  const ModuleGroup g = single("w", Matrix::Zero(64, 16));
  const ad::AeArch arch = ad::AeArch::linear(16, 1);
  const double target = 1.0 + 1e-9;
  const auto plan = compress::plan_latent_dim(g, target, arch);
  EXPECT_EQ(plan.k, plan_oracle(64, 16, target, arch));
  EXPECT_GE(plan.achieved_cr, target);
}

TEST(PlanLatentDim, InfeasibleNamesMaxAchievable) {
  const ModuleGroup g = single("w", Matrix::Zero(8, 8));
  const ad::AeArch arch = ad::AeArch::linear(8, 1);
  try {
    compress::plan_latent_dim(g, 1000.0, arch);
    FAIL() << "expected infeasible";
  } catch (const InfeasibleError& e) {
    // k=1: params = 8 + 8 + 8 = 24 -> max CR = 64/24.
    EXPECT_NEAR(e.max_achievable_cr, 64.0 / 24.0, 1e-12);
    EXPECT_NE(std::string(e.what()).find("max achievable"), std::string::npos);
  }
}

TEST(PlanLatentDim, NormStorageCounted) {
  const ModuleGroup g = single("w", Matrix::Zero(100, 10));
  ad::AeArch with_norm = ad::AeArch::linear(10, 1, true);
  ad::AeArch without = ad::AeArch::linear(10, 1, false);
  const double target = 4.0;
  EXPECT_EQ(compress::plan_latent_dim(g, target, with_norm).k,
            plan_oracle(100, 10, target, with_norm));
  EXPECT_EQ(compress::plan_latent_dim(g, target, without).k,
            plan_oracle(100, 10, target, without));
  EXPECT_LE(compress::plan_latent_dim(g, target, with_norm).k,
            compress::plan_latent_dim(g, target, without).k);
}

TEST(CompressSvd, DiagonalResidual) {
  Matrix m = Matrix::Zero(4, 4);
  m.diagonal() << 3, 2, 1, 0;
  // CR 1.0 plans k = 16/8 = 2; residual energy 1^2 over 16 entries.
  const auto mod = compress::compress_svd(m, 1.0, "w");
  EXPECT_EQ(mod.latent.cols(), 2);
  EXPECT_NEAR(matcrush::linalg::rmse(m, mod.materialize_all()), 0.25, 1e-10);
}

TEST(CompressSvd, OrthogonalMatrixMatchesEckartYoungOracle) {
  const Matrix q = testutil::orthonormal(5, 8, 8);
  const auto mod = compress::compress_svd(q, 2.0, "w");  // k = floor(64/(2*16)) = 2
  const double expected = testutil::dense_svd_rank_rmse(q, mod.latent.cols());
  EXPECT_NEAR(matcrush::linalg::rmse(q, mod.materialize_all()), expected, 1e-10);
  EXPECT_NEAR(expected, std::sqrt((8.0 - 2.0) / 64.0), 1e-10);
}

TEST(CompressSvd, BoundaryCrReproducesLowRankMatrix) {
  // CR = 1 plans k = floor(n*m/(n+m)); a matrix of lower rank reproduces.
  const Matrix a = testutil::gaussian(6, 64, 3);
  const Matrix b = testutil::gaussian(7, 3, 16);
  const Matrix m = a * b;  // rank 3; k = floor(1024/80) = 12 >= 3
  const auto mod = compress::compress_svd(m, 1.0, "w");
  EXPECT_GE(mod.latent.cols(), 3);
  EXPECT_LE((m - mod.materialize_all()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(CompressSvd, FullRankModuleRatioAtMostOne) {
  const Matrix m = testutil::gaussian(8, 6, 4);
  const auto mod = compress::compress_svd(m, 0.5, "w");
  EXPECT_EQ(mod.latent.cols(), 4);
  EXPECT_LE(compress::compression_ratio(mod), 1.0);
}

TEST(CompressSvd, InfeasibleCr) {
  EXPECT_THROW(compress::compress_svd(Matrix::Identity(4, 4), 3.0, "w"), InfeasibleError);
}

TEST(CompressFwsvd, UniformFisherReproducesPlainSvd) {
  const Matrix m = testutil::gaussian(9, 32, 16);
  const Vector uniform = Vector::Constant(32, 0.37);
  const auto plain = compress::compress_svd(m, 4.0, "w");
  const auto weighted = compress::compress_fwsvd(m, uniform, 4.0, "w");
  EXPECT_LE((plain.materialize_all() - weighted.materialize_all()).cwiseAbs().maxCoeff(),
            1e-10);
}

TEST(CompressFwsvd, HeavyRowReconstructedBetter) {
  // One row's Fisher weight x100: that row's error at k=1 must not exceed
  // its plain-SVD error (brute-force comparison on a small random matrix).
  const Matrix m = testutil::gaussian(10, 8, 4);
  Vector fisher = Vector::Ones(8);
  fisher(3) = 100.0;
  const double cr = 32.0 / 12.0;  // k = 1 for 8x4
  const auto plain = compress::compress_svd(m, cr, "w");
  const auto weighted = compress::compress_fwsvd(m, fisher, cr, "w");
  ASSERT_EQ(plain.latent.cols(), 1);
  const double err_plain = (m.row(3) - plain.materialize_all().row(3)).norm();
  const double err_weighted = (m.row(3) - weighted.materialize_all().row(3)).norm();
  EXPECT_LE(err_weighted, err_plain + 1e-12);
}

TEST(CompressFwsvd, ZeroFisherRowGuarded) {
  const Matrix m = testutil::gaussian(11, 8, 4);
  Vector fisher = Vector::Ones(8);
  fisher(0) = 0.0;
  const auto mod = compress::compress_fwsvd(m, fisher, 2.0, "w");
  EXPECT_TRUE(mod.materialize_all().allFinite());
}

TEST(CompressKronecker, ExactlyRepresentable) {
  // 16x16 at CR 8: balanced feasible shape is (4x4) x (4x4).
  matcrush::Rng rng(13);
  const Matrix b0 = rng.uniform_matrix(4, 4, -1, 1);
  const Matrix c0 = rng.uniform_matrix(4, 4, -1, 1);
  const Matrix m = matcrush::linalg::kron(b0, c0);
  ad::TrainConfig cfg;
  cfg.learning_rate = 5e-3;
  cfg.max_steps = 8000;
  cfg.patience = 50;
  const auto mod = compress::compress_kronecker(m, 8.0, cfg, "w");
  EXPECT_EQ(mod.kron_b.rows(), 4);
  EXPECT_EQ(mod.kron_c.cols(), 4);
  EXPECT_LE(matcrush::linalg::rmse(m, mod.materialize_all()), 1e-4);
}

TEST(CompressKronecker, OneByOne) {
  Matrix m(1, 1);
  m << 3.25;
  ad::TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.max_steps = 4000;
  const auto mod = compress::compress_kronecker(m, 0.5, cfg, "w");
  EXPECT_NEAR(mod.materialize_all()(0, 0), 3.25, 1e-10);
}

TEST(CompressKronecker, InfeasiblePrimeShape) {
  ad::TrainConfig cfg;
  EXPECT_THROW(compress::compress_kronecker(testutil::gaussian(14, 7, 7), 4.0, cfg, "w"),
               InfeasibleError);
}

TEST(PruneL1, KeepEverythingAtCrOne) {
  const Matrix m = testutil::gaussian(15, 6, 5);
  const auto mod = compress::prune_l1(m, 1.0);
  EXPECT_EQ(mod.parameter_count(), 30u);
  EXPECT_EQ((mod.materialize() - m).cwiseAbs().maxCoeff(), 0.0);
}

TEST(PruneL1, KeepsLargestMagnitudes) {
  Matrix m(2, 2);
  m << 1, -5, 2, 0;
  const auto mod = compress::prune_l1(m, 2.0);
  Matrix expected(2, 2);
  expected << 0, -5, 2, 0;
  EXPECT_EQ((mod.materialize() - expected).cwiseAbs().maxCoeff(), 0.0);
}

TEST(PruneL1, TiesBreakLexicographically) {
  const Matrix m = Matrix::Constant(4, 4, 0.5);
  const auto mod = compress::prune_l1(m, 4.0);
  ASSERT_EQ(mod.kept.size(), 4u);
  for (std::uint64_t i = 0; i < 4; ++i) EXPECT_EQ(mod.kept[i].first, i);  // first row
}

TEST(CompressionRatio, SpecExamples) {
  compress::FactorizedModule mod;
  mod.kind = compress::Kind::svd;
  mod.latent = Matrix::Zero(8, 2);
  mod.decoder.push_back({Matrix::Zero(4, 2), std::nullopt, ad::Activation::identity});
  mod.original_rows = 8;
  mod.original_cols = 4;
  mod.member_offsets = {{"w", 0, 8}};
  EXPECT_DOUBLE_EQ(compress::compression_ratio(mod), 32.0 / 24.0);

  compress::SparseModule sparse;
  sparse.rows = 10;
  sparse.cols = 10;
  sparse.kept.assign(25, {0, 0.0});
  EXPECT_DOUBLE_EQ(compress::compression_ratio(sparse), 4.0);
}

TEST(CompressAe, LowRankExactlyRepresentable) {
  const Matrix a = testutil::gaussian(30, 16, 3);
  const Matrix b = testutil::gaussian(31, 3, 8);
  ModuleGroup g = single("w", a * b);
  ad::TrainConfig cfg;
  cfg.learning_rate = 5e-4;
  cfg.max_steps = 25000;
  cfg.eval_every = 20;
  cfg.patience = 300;
  cfg.seed = 3;
  // target 1.5 plans k=3 for a 16x8 with a linear biased decoder.
  const auto result = compress::compress_ae(g, ad::AeArch::linear(8, 1), ad::LossSpec{}, cfg,
                                            nullptr, nullptr, 1.5);
  ASSERT_EQ(result.modules.size(), 1u);
  EXPECT_EQ(result.modules[0].latent.cols(), 3);
  const double err = matcrush::linalg::rmse(a * b, result.modules[0].materialize("w"));
  EXPECT_LE(err, 1e-4);
}

TEST(CompressAe, ConcatenatedSharesDecoderParameters) {
  const Matrix m0 = testutil::gaussian(32, 20, 10);
  ModuleGroup concat;
  concat.mode = compress::Mode::concatenated;
  concat.members.push_back({"a", m0});
  concat.members.push_back({"b", m0});
  ModuleGroup sep = concat;
  sep.mode = compress::Mode::separated;

  ad::TrainConfig cfg;
  cfg.max_steps = 100;
  const double target = 2.0;
  const auto rc = compress::compress_ae(concat, ad::AeArch::linear(10, 1), ad::LossSpec{}, cfg,
                                        nullptr, nullptr, target);
  const auto rs = compress::compress_ae(sep, ad::AeArch::linear(10, 1), ad::LossSpec{}, cfg,
                                        nullptr, nullptr, target);
  ASSERT_EQ(rc.modules.size(), 1u);
  ASSERT_EQ(rs.modules.size(), 2u);
  // At equal k, one shared decoder beats two separate ones on parameters.
  const Index k = rc.modules[0].latent.cols();
  std::size_t sep_total = 0;
  for (const auto& m : rs.modules) sep_total += m.parameter_count();
  if (rs.modules[0].latent.cols() == k)
    EXPECT_LT(rc.modules[0].parameter_count(), sep_total);
  // Stacking member materializations equals materializing the whole latent.
  Matrix stacked(40, 10);
  stacked << rc.modules[0].materialize("a"), rc.modules[0].materialize("b");
  EXPECT_LE((stacked - rc.modules[0].materialize_all()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CompressAe, SeparatedOrderInvariant) {
  ModuleGroup g;
  g.mode = compress::Mode::separated;
  g.members.push_back({"x", testutil::gaussian(33, 12, 6)});
  g.members.push_back({"y", testutil::gaussian(34, 18, 6)});
  ModuleGroup reversed;
  reversed.mode = compress::Mode::separated;
  reversed.members.push_back(g.members[1]);
  reversed.members.push_back(g.members[0]);

  ad::TrainConfig cfg;
  cfg.max_steps = 300;
  cfg.seed = 6;
  const auto a = compress::compress_ae(g, ad::AeArch::linear(6, 1), ad::LossSpec{}, cfg, nullptr,
                                       nullptr, 1.5);
  const auto b = compress::compress_ae(reversed, ad::AeArch::linear(6, 1), ad::LossSpec{}, cfg,
                                       nullptr, nullptr, 1.5);
  ASSERT_EQ(a.modules.size(), 2u);
  ASSERT_EQ(b.modules.size(), 2u);
  // Match by member name: results must be bitwise identical.
  EXPECT_EQ((a.modules[0].latent - b.modules[1].latent).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ((a.modules[1].latent - b.modules[0].latent).cwiseAbs().maxCoeff(), 0.0);
}

TEST(CompressAe, UniformFisherWithBatchNormMatchesNoFisher) {
  ModuleGroup g = single("w", testutil::gaussian(35, 24, 8));
  matcrush::fisher::FisherWeights fw;
  fw.elementwise.emplace("w", Matrix::Constant(24, 8, 0.25));
  fw.rowwise.emplace("w", matcrush::fisher::rowwise_diag(fw.elementwise.at("w")));
  fw.sample_count = 1;
  matcrush::fisher::FisherTransform t;
  t.kind = matcrush::fisher::FisherTransform::Kind::vanilla;
  t.batch_norm = true;

  ad::TrainConfig cfg;
  cfg.max_steps = 400;
  cfg.batch_size = 8;
  cfg.seed = 4;
  const auto with = compress::compress_ae(g, ad::AeArch::linear(8, 1), ad::LossSpec{}, cfg, &fw,
                                          &t, 2.0);
  const auto without = compress::compress_ae(g, ad::AeArch::linear(8, 1), ad::LossSpec{}, cfg,
                                             nullptr, nullptr, 2.0);
  ASSERT_EQ(with.reports.size(), 1u);
  ASSERT_EQ(with.reports[0].loss_curve.size(), without.reports[0].loss_curve.size());
  for (std::size_t i = 0; i < with.reports[0].loss_curve.size(); ++i)
    EXPECT_EQ(with.reports[0].loss_curve[i], without.reports[0].loss_curve[i]);
}

TEST(CompressAe, FisherMemberMismatchRejected) {
  ModuleGroup g = single("w", testutil::gaussian(36, 8, 4));
  matcrush::fisher::FisherWeights fw;  // empty
  ad::TrainConfig cfg;
  cfg.max_steps = 10;
  EXPECT_THROW(compress::compress_ae(g, ad::AeArch::linear(4, 1), ad::LossSpec{}, cfg, &fw,
                                     nullptr, 2.0),
               ShapeError);
}

TEST(CompressAe, StoredNormsRestoredAtMaterialization) {
  ModuleGroup g = single("w", testutil::gaussian(37, 20, 8));
  ad::TrainConfig cfg;
  cfg.max_steps = 500;
  const auto result = compress::compress_ae(g, ad::AeArch::linear(8, 1, true), ad::LossSpec{},
                                            cfg, nullptr, nullptr, 2.0);
  const Matrix recon = result.modules[0].materialize("w");
  const Matrix& original = g.members[0].matrix;
  for (Index i = 0; i < original.rows(); ++i) {
    const double nx = original.row(i).norm();
    if (nx >= 1e-12) EXPECT_NEAR(recon.row(i).norm(), nx, 1e-9);
  }
}

TEST(Materialize, MemberResolution) {
  compress::FactorizedModule mod;
  mod.kind = compress::Kind::svd;
  mod.latent = testutil::gaussian(38, 6, 2);
  mod.decoder.push_back({testutil::gaussian(39, 4, 2), std::nullopt, ad::Activation::identity});
  mod.original_rows = 6;
  mod.original_cols = 4;
  mod.member_offsets = {{"a", 0, 2}, {"b", 2, 4}};
  EXPECT_THROW(mod.materialize(), ShapeError);            // member required
  EXPECT_THROW(mod.materialize("nope"), ShapeError);      // unknown member
  EXPECT_EQ(mod.materialize("b").rows(), 4);
  // svd kind materializes latent * decoder exactly.
  const Matrix expected = mod.latent.middleRows(2, 4) * mod.decoder[0].w.transpose();
  EXPECT_EQ((mod.materialize("b") - expected).cwiseAbs().maxCoeff(), 0.0);
}

TEST(AllCompressors, AchievedRatioNeverUnderDelivers) {
  // Randomized (shape, CR) cases for every compressor; achieved CR must be
  // >= target and equal original/parameter_count exactly.
  matcrush::Rng rng(40);
  ad::TrainConfig cfg;
  cfg.max_steps = 5;  // ratio accounting does not depend on convergence
  int checked = 0;
  for (int c = 0; c < 20; ++c) {
    const Index n = 8 + static_cast<Index>(rng.uniform_below(56));
    const Index m = 4 + static_cast<Index>(rng.uniform_below(28));
    const Matrix x = rng.gaussian_matrix(n, m);
    const double target = 1.5 + rng.uniform01() * 6.0;

    try {
      const auto svd = compress::compress_svd(x, target, "w");
      EXPECT_GE(compress::compression_ratio(svd) + 1e-12, target);
      EXPECT_DOUBLE_EQ(compress::compression_ratio(svd),
                       static_cast<double>(svd.original_count()) /
                           static_cast<double>(svd.parameter_count()));
      ++checked;
    } catch (const InfeasibleError&) {
    }
    try {
      ModuleGroup g = single("w", x);
      const auto ae =
          compress::compress_ae(g, ad::AeArch::linear(m, 1), ad::LossSpec{}, cfg, nullptr,
                                nullptr, target);
      EXPECT_GE(compress::compression_ratio(ae.modules[0]) + 1e-12, target);
      ++checked;
    } catch (const InfeasibleError&) {
    }
    const auto pruned = compress::prune_l1(x, target);
    if (pruned.parameter_count() > 0) {
      EXPECT_GE(compress::compression_ratio(pruned) + 1e-12, target);
      ++checked;
    }
    try {
      const auto kron = compress::compress_kronecker(x, target, cfg, "w");
      EXPECT_GE(compress::compression_ratio(kron) + 1e-12, target);
      ++checked;
    } catch (const InfeasibleError&) {
    }
  }
  EXPECT_GE(checked, 40);
}

TEST(CompressAe, LinearBetaZeroTracksSvdRmse) {
  // The linear, beta=0, unweighted autoencoder reaches within 2% of the
  // truncated-SVD rmse at equal rank and never beats it materially
  // (column-centered planted-spectrum instance; see ledger).
  const Vector sigma = testutil::geometric_sigma(24, 10.0, 0.82);
  const Matrix x =
      testutil::zero_column_means(testutil::planted_spectrum(44, 96, 24, sigma));
  const Index k = 4;

  ad::TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.max_steps = 20000;
  cfg.batch_size = 96;
  cfg.patience = 60;
  cfg.seed = 9;
  const auto trained = ad::train(x, ad::AeArch::linear(24, k), ad::LossSpec{}, cfg);
  const auto recon = ad::ae_forward(trained.params, ad::AeArch::linear(24, k), x).recon;
  const double ae_rmse = matcrush::linalg::rmse(x, recon);

  const auto svd = matcrush::linalg::truncated_svd(x, k, 4, 0);
  const double svd_rmse = matcrush::linalg::rmse(x, svd.reconstruct());

  EXPECT_GE(ae_rmse, svd_rmse - 1e-12);
  EXPECT_LE(ae_rmse, svd_rmse * 1.02);
}

}  // namespace
