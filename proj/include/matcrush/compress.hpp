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
//
// The compressor suite: autoencoder compression in separated/concatenated
// modes, SVD / Fisher-weighted SVD / Kronecker / pruning baselines, exact
// compression-ratio accounting, and substitution-module materialization.

#ifndef MATCRUSH_COMPRESS_HPP_
#define MATCRUSH_COMPRESS_HPP_

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "matcrush/autodiff.hpp"
#include "matcrush/fisher.hpp"
#include "matcrush/linalg.hpp"
#include "matcrush/tensor_io.hpp"

namespace matcrush::compress {

using json = nlohmann::json;

enum class Kind { ae, svd, fwsvd, kronecker };
enum class Mode { separated, concatenated };

inline std::string to_string(Kind k) {
  switch (k) {
    case Kind::ae: return "ae";
    case Kind::svd: return "svd";
    case Kind::fwsvd: return "fwsvd";
    case Kind::kronecker: return "kronecker";
  }
  return "ae";
}

inline std::string to_string(Mode m) {
  return m == Mode::separated ? "separated" : "concatenated";
}

/// Ordered set of same-width matrices compressed together (same-type modules
/// across layers in the concatenated mode).
struct ModuleGroup {
  struct Member {
    std::string name;
    Matrix matrix;
  };
  std::vector<Member> members;
  Mode mode = Mode::separated;

  void validate() const {
    if (members.empty()) throw ShapeError("ModuleGroup: no members");
    const Index m = members.front().matrix.cols();
    std::set<std::string> names;
    for (const auto& mem : members) {
      if (mem.name.empty()) throw ShapeError("ModuleGroup: empty member name");
      if (!names.insert(mem.name).second)
        throw ShapeError("ModuleGroup: duplicate member " + mem.name);
      if (mem.matrix.cols() != m)
        throw ShapeError("ModuleGroup: column dimension mismatch for " + mem.name);
      if (mem.matrix.rows() < 1 || mem.matrix.cols() < 1)
        throw ShapeError("ModuleGroup: degenerate member " + mem.name);
      if (!all_finite(mem.matrix))
        throw ShapeError("ModuleGroup: non-finite member " + mem.name);
    }
  }

  Index cols() const { return members.front().matrix.cols(); }

  Index total_rows() const {
    Index n = 0;
    for (const auto& m : members) n += m.matrix.rows();
    return n;
  }

  Matrix stacked() const {
    Matrix x(total_rows(), cols());
    Index r = 0;
    for (const auto& m : members) {
      x.middleRows(r, m.matrix.rows()) = m.matrix;
      r += m.matrix.rows();
    }
    return x;
  }
};

struct MemberRange {
  std::string name;
  Index row_begin = 0;
  Index rows = 0;
};

/// One decoder layer: y = x * w^T (+ b), then activation. SVD-style modules
/// carry a single bias-free identity layer (w = V, so y = latent * V^T).
struct DecoderLayer {
  Matrix w;  // out x in
  std::optional<Vector> b;
  ad::Activation act = ad::Activation::identity;

  std::size_t param_count() const {
    return static_cast<std::size_t>(w.size()) +
           (b ? static_cast<std::size_t>(b->size()) : 0);
  }
};

inline Matrix run_decoder(const std::vector<DecoderLayer>& layers, const Matrix& x) {
  Matrix h = x;
  for (const auto& l : layers) {
    h = h * l.w.transpose();
    if (l.b) h.rowwise() += l.b->transpose();
    if (l.act == ad::Activation::leaky_relu)
      h = h.unaryExpr([](double v) { return v > 0.0 ? v : ad::kLeakyReluSlope * v; });
    else if (l.act == ad::Activation::tanh)
      h = h.array().tanh().matrix();
  }
  return h;
}

/// The substitution module: latent rows plus a decoder (or Kronecker factor
/// pair), optionally with stored row norms. The encoder is discarded.
struct FactorizedModule {
  Kind kind = Kind::svd;
  Mode mode = Mode::separated;
  Matrix latent;                      // n x k (ae/svd/fwsvd)
  std::vector<DecoderLayer> decoder;  // ae/svd/fwsvd
  Matrix kron_b, kron_c;              // kronecker
  std::optional<Vector> stored_row_norms;
  Index original_rows = 0;
  Index original_cols = 0;
  std::vector<MemberRange> member_offsets;

  std::size_t parameter_count() const {
    if (kind == Kind::kronecker)
      return static_cast<std::size_t>(kron_b.size()) + static_cast<std::size_t>(kron_c.size());
    std::size_t c = static_cast<std::size_t>(latent.size());
    for (const auto& l : decoder) c += l.param_count();
    if (stored_row_norms) c += static_cast<std::size_t>(stored_row_norms->size());
    return c;
  }

  std::size_t original_count() const {
    return static_cast<std::size_t>(original_rows) * static_cast<std::size_t>(original_cols);
  }

  const MemberRange& resolve_member(const std::optional<std::string>& member) const {
    if (member_offsets.empty()) throw ShapeError("module has no members");
    if (!member) {
      if (member_offsets.size() != 1)
        throw ShapeError("member name required for a concatenated module");
      return member_offsets.front();
    }
    for (const auto& r : member_offsets)
      if (r.name == *member) return r;
    throw ShapeError("unknown member: " + *member);
  }

  /// Dense reconstruction of one member (or of the only member).
  Matrix materialize(const std::optional<std::string>& member = std::nullopt) const {
    const MemberRange& range = resolve_member(member);
    if (kind == Kind::kronecker) {
      const Matrix full = linalg::kron(kron_b, kron_c);
      return full.middleRows(range.row_begin, range.rows);
    }
    Matrix recon = run_decoder(decoder, latent.middleRows(range.row_begin, range.rows));
    if (stored_row_norms)
      recon = ad::rescale_rows_to_norms(std::move(recon),
                                        stored_row_norms->segment(range.row_begin, range.rows));
    return recon;
  }

  /// Reconstruction of the whole (possibly stacked) matrix.
  Matrix materialize_all() const {
    if (kind == Kind::kronecker) return linalg::kron(kron_b, kron_c);
    Matrix recon = run_decoder(decoder, latent);
    if (stored_row_norms) recon = ad::rescale_rows_to_norms(std::move(recon), *stored_row_norms);
    return recon;
  }
};

/// Unstructured magnitude pruning result. Only kept values count as
/// parameters (no index storage), which is optimistic for pruning.
struct SparseModule {
  Index rows = 0;
  Index cols = 0;
  std::vector<std::pair<std::uint64_t, double>> kept;  // (row-major index, value)

  std::size_t parameter_count() const { return kept.size(); }
  std::size_t original_count() const {
    return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  }

  Matrix materialize() const {
    Matrix m = Matrix::Zero(rows, cols);
    for (const auto& [idx, v] : kept)
      m(static_cast<Index>(idx / static_cast<std::uint64_t>(cols)),
        static_cast<Index>(idx % static_cast<std::uint64_t>(cols))) = v;
    return m;
  }
};

inline double compression_ratio(const FactorizedModule& m) {
  return static_cast<double>(m.original_count()) / static_cast<double>(m.parameter_count());
}

inline double compression_ratio(const SparseModule& m) {
  return static_cast<double>(m.original_count()) / static_cast<double>(m.parameter_count());
}

// ---------------------------------------------------------------------------
// Latent-size planning (compression-ratio accounting)
// ---------------------------------------------------------------------------

/// Decoder parameter count (weights + biases) when the latent width is k.
inline std::size_t decoder_param_count_at(const ad::AeArch& arch, Index k) {
  std::size_t count = 0;
  Index in = k;
  for (const auto& l : arch.decoder) {
    count += static_cast<std::size_t>(l.width) * static_cast<std::size_t>(in) +
             static_cast<std::size_t>(l.width);
    in = l.width;
  }
  return count;
}

struct LatentPlan {
  Index k = 0;
  double achieved_cr = 0.0;
  std::size_t parameter_count = 0;
};

/// Largest k whose substitution module still reaches the target ratio:
/// (sum n_i * m) / ((sum n_i) * k + |Phi(k)| + norm storage).
inline LatentPlan plan_latent_dim(const ModuleGroup& group, double target_cr,
                                  const ad::AeArch& arch) {
  group.validate();
  if (!(target_cr > 1.0)) throw ShapeError("plan_latent_dim: target_cr must be > 1");
  const std::size_t n = static_cast<std::size_t>(group.total_rows());
  const std::size_t original = n * static_cast<std::size_t>(group.cols());
  const std::size_t norm_params = arch.preserve_norm ? n : 0;

  auto params_at = [&](Index k) {
    return n * static_cast<std::size_t>(k) + decoder_param_count_at(arch, k) + norm_params;
  };
  auto cr_at = [&](Index k) {
    return static_cast<double>(original) / static_cast<double>(params_at(k));
  };

  if (cr_at(1) < target_cr) {
    char msg[160];
    std::snprintf(msg, sizeof(msg),
                  "target CR %.4f unreachable for this group; max achievable CR is %.4f (k=1)",
                  target_cr, cr_at(1));
    throw InfeasibleError(cr_at(1), msg);
  }
  Index k = 1;
  while (cr_at(k + 1) >= target_cr) ++k;
  return {k, cr_at(k), params_at(k)};
}

// ---------------------------------------------------------------------------
// SVD and Fisher-weighted SVD
// ---------------------------------------------------------------------------

namespace detail {

/// Largest k with k*(n+m) within the parameter budget n*m/target_cr.
inline Index svd_rank_for_cr(Index n, Index m, double target_cr) {
  const double budget = static_cast<double>(n) * static_cast<double>(m) / target_cr;
  const double per_rank = static_cast<double>(n + m);
  Index k = static_cast<Index>(budget / per_rank);
  while (k >= 1 && static_cast<double>(k) * per_rank > budget) --k;
  while (static_cast<double>(k + 1) * per_rank <= budget) ++k;
  k = std::min(k, std::min(n, m));
  if (k < 1) {
    const double max_cr = static_cast<double>(n) * static_cast<double>(m) / per_rank;
    char msg[160];
    std::snprintf(msg, sizeof(msg),
                  "target CR %.4f unreachable for %lldx%lld SVD; max achievable CR is %.4f (k=1)",
                  target_cr, static_cast<long long>(n), static_cast<long long>(m), max_cr);
    throw InfeasibleError(max_cr, msg);
  }
  return k;
}

inline FactorizedModule svd_module(const std::string& name, const linalg::TruncatedSvd& svd,
                                   Index n, Index m, Kind kind) {
  FactorizedModule mod;
  mod.kind = kind;
  mod.mode = Mode::separated;
  mod.latent = svd.u * svd.s.asDiagonal();
  mod.decoder.push_back({svd.v, std::nullopt, ad::Activation::identity});
  mod.original_rows = n;
  mod.original_cols = m;
  mod.member_offsets = {{name, 0, n}};
  return mod;
}

}  // namespace detail

inline FactorizedModule compress_svd(const Matrix& matrix, double target_cr,
                                     const std::string& name = "matrix",
                                     int power_iters = 4, std::uint64_t seed = 0) {
  const Index n = matrix.rows();
  const Index m = matrix.cols();
  const Index k = detail::svd_rank_for_cr(n, m, target_cr);
  const auto svd = linalg::truncated_svd(matrix, k, power_iters, seed);
  return detail::svd_module(name, svd, n, m, Kind::svd);
}

/// Fisher-weighted SVD: factor diag(I) * W, then unscale the left factor, so
/// rows with large Fisher weight are reconstructed more faithfully.
inline FactorizedModule compress_fwsvd(const Matrix& matrix, const Vector& fisher_row,
                                       double target_cr, const std::string& name = "matrix",
                                       int power_iters = 4, std::uint64_t seed = 0) {
  const Index n = matrix.rows();
  const Index m = matrix.cols();
  if (fisher_row.size() != n) throw ShapeError("compress_fwsvd: fisher length mismatch");
  if (!fisher_row.allFinite() || fisher_row.minCoeff() < 0.0)
    throw ShapeError("compress_fwsvd: fisher must be finite and non-negative");
  const Index k = detail::svd_rank_for_cr(n, m, target_cr);

  const Vector d = fisher_row.cwiseMax(1e-12);
  const Matrix scaled = d.asDiagonal() * matrix;
  const auto svd = linalg::truncated_svd(scaled, k, power_iters, seed);

  FactorizedModule mod = detail::svd_module(name, svd, n, m, Kind::fwsvd);
  mod.latent = d.cwiseInverse().asDiagonal() * mod.latent;
  return mod;
}

// ---------------------------------------------------------------------------
// Kronecker baseline
// ---------------------------------------------------------------------------

namespace detail {

struct KronShape {
  Index n1 = 0, m1 = 0, n2 = 0, m2 = 0;
  std::size_t params() const {
    return static_cast<std::size_t>(n1) * static_cast<std::size_t>(m1) +
           static_cast<std::size_t>(n2) * static_cast<std::size_t>(m2);
  }
};

/// Feasible factor shapes closest to balanced ("nearest-square"): minimal
/// |n1*m1 - n2*m2|, then most-square individual factors, then the smaller
/// (n1, m1) for determinism.
inline KronShape kron_shape_for_budget(Index n, Index m, double budget) {
  std::optional<KronShape> best;
  std::size_t min_params = std::numeric_limits<std::size_t>::max();
  const auto rank_of = [](const KronShape& x) {
    const auto a = static_cast<long long>(x.n1) * x.m1;
    const auto b = static_cast<long long>(x.n2) * x.m2;
    return std::make_tuple(std::llabs(a - b),
                           std::llabs(static_cast<long long>(x.n1) - x.m1) +
                               std::llabs(static_cast<long long>(x.n2) - x.m2),
                           static_cast<long long>(x.n1), static_cast<long long>(x.m1));
  };
  for (Index n1 = 1; n1 <= n; ++n1) {
    if (n % n1 != 0) continue;
    for (Index m1 = 1; m1 <= m; ++m1) {
      if (m % m1 != 0) continue;
      KronShape s{n1, m1, n / n1, m / m1};
      min_params = std::min(min_params, s.params());
      if (static_cast<double>(s.params()) > budget) continue;
      if (!best || rank_of(s) < rank_of(*best)) best = s;
    }
  }
  if (!best) {
    const double max_cr = static_cast<double>(n) * static_cast<double>(m) /
                          static_cast<double>(min_params);
    char msg[160];
    std::snprintf(msg, sizeof(msg),
                  "no feasible Kronecker factorization within budget; max achievable CR is %.4f",
                  max_cr);
    throw InfeasibleError(max_cr, msg);
  }
  return *best;
}

}  // namespace detail

/// Fits B (n1 x m1) and C (n2 x m2) minimizing rmse(M, kron(B, C)) with Adam.
inline FactorizedModule compress_kronecker(const Matrix& matrix, double target_cr,
                                           const ad::TrainConfig& cfg,
                                           const std::string& name = "matrix") {
  const Index n = matrix.rows();
  const Index m = matrix.cols();
  if (!all_finite(matrix)) throw ShapeError("compress_kronecker: non-finite input");
  const double budget = static_cast<double>(n) * static_cast<double>(m) / target_cr;
  const auto shape = detail::kron_shape_for_budget(n, m, budget);

  Rng rng(derive_seed(cfg.seed, 0x6b));
  const double rms = std::sqrt(matrix.squaredNorm() / static_cast<double>(matrix.size()));
  const double scale = rms > 0.0 ? std::sqrt(rms) : 1.0;
  Matrix b = rng.uniform_matrix(shape.n1, shape.m1, -scale, scale);
  Matrix c = rng.uniform_matrix(shape.n2, shape.m2, -scale, scale);

  ad::Adam adam(cfg.learning_rate, cfg.adam);
  ad::ParamStore store;
  const int bid = store.add("b", b);
  const int cid = store.add("c", c);

  Matrix best_b = b, best_c = c;
  double best = std::numeric_limits<double>::infinity();
  double best_at_last_eval = std::numeric_limits<double>::infinity();
  int evals_since_improvement = 0;
  const double nm = static_cast<double>(n) * static_cast<double>(m);

  for (std::int64_t step = 1; step <= cfg.max_steps; ++step) {
    const Matrix& bv = store.entries[static_cast<std::size_t>(bid)].value;
    const Matrix& cv = store.entries[static_cast<std::size_t>(cid)].value;
    const Matrix err = linalg::kron(bv, cv) - matrix;
    const double cur = std::sqrt(err.squaredNorm() / nm);
    if (!std::isfinite(cur))
      throw DivergenceError(step, "kronecker fit diverged at step " + std::to_string(step));
    if (cur < best) {
      best = cur;
      best_b = bv;
      best_c = cv;
    }
    store.zero_grads();
    const double denom = cur > 0.0 ? nm * cur : 1.0;
    Matrix& gb = store.entries[static_cast<std::size_t>(bid)].grad;
    Matrix& gc = store.entries[static_cast<std::size_t>(cid)].grad;
    for (Index i = 0; i < shape.n1; ++i)
      for (Index j = 0; j < shape.m1; ++j) {
        const auto blockE = err.block(i * shape.n2, j * shape.m2, shape.n2, shape.m2);
        gb(i, j) = blockE.cwiseProduct(cv).sum() / denom;
        gc += (bv(i, j) / denom) * blockE;
      }
    adam.step(store);

    if (step % cfg.eval_every == 0) {
      if (best < best_at_last_eval - 1e-15)
        evals_since_improvement = 0;
      else
        ++evals_since_improvement;
      best_at_last_eval = best;
      if (evals_since_improvement >= cfg.patience) break;
      const int half_patience = std::max(1, cfg.patience / 2);
      if (evals_since_improvement > 0 && evals_since_improvement % half_patience == 0 &&
          adam.learning_rate() > cfg.learning_rate / 1024.0)
        adam.set_learning_rate(adam.learning_rate() * 0.5);
    }
  }

  // Closed-form optimal rescale of the fitted product; exact for 1x1.
  {
    const Matrix fit = linalg::kron(best_b, best_c);
    const double denom = fit.squaredNorm();
    if (denom > 0.0) best_b *= fit.cwiseProduct(matrix).sum() / denom;
  }

  FactorizedModule mod;
  mod.kind = Kind::kronecker;
  mod.mode = Mode::separated;
  mod.kron_b = std::move(best_b);
  mod.kron_c = std::move(best_c);
  mod.original_rows = n;
  mod.original_cols = m;
  mod.member_offsets = {{name, 0, n}};
  return mod;
}

// ---------------------------------------------------------------------------
// Magnitude pruning baseline
// ---------------------------------------------------------------------------

/// Keeps the floor(n*m/target_cr) largest-|value| entries; ties broken in
/// (row, col) lexicographic order.
inline SparseModule prune_l1(const Matrix& matrix, double target_cr) {
  if (!(target_cr >= 1.0)) throw ShapeError("prune_l1: target_cr must be >= 1");
  if (!all_finite(matrix)) throw ShapeError("prune_l1: non-finite input");
  const Index n = matrix.rows();
  const Index m = matrix.cols();
  const std::size_t total = static_cast<std::size_t>(n) * static_cast<std::size_t>(m);
  const std::size_t keep =
      std::min(total, static_cast<std::size_t>(static_cast<double>(total) / target_cr));

  std::vector<std::uint64_t> idx(total);
  for (std::size_t i = 0; i < total; ++i) idx[i] = i;
  const auto value_at = [&](std::uint64_t i) {
    return matrix(static_cast<Index>(i / static_cast<std::uint64_t>(m)),
                  static_cast<Index>(i % static_cast<std::uint64_t>(m)));
  };
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep), idx.end(),
                   [&](std::uint64_t a, std::uint64_t b) {
                     const double fa = std::abs(value_at(a));
                     const double fb = std::abs(value_at(b));
                     if (fa != fb) return fa > fb;
                     return a < b;  // lexicographic (row, col) == linear index order
                   });
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());

  SparseModule out;
  out.rows = n;
  out.cols = m;
  out.kept.reserve(keep);
  for (std::uint64_t i : idx) out.kept.emplace_back(i, value_at(i));
  return out;
}

// ---------------------------------------------------------------------------
// Autoencoder compression
// ---------------------------------------------------------------------------

struct AeCompressResult {
  std::vector<FactorizedModule> modules;  // one (concatenated) or per member
  std::vector<ad::TrainReport> reports;   // aligned with modules
};

namespace detail {

inline std::vector<DecoderLayer> to_decoder_layers(const std::vector<ad::LayerParams>& layers) {
  std::vector<DecoderLayer> out;
  out.reserve(layers.size());
  for (const auto& l : layers) out.push_back({l.w, l.b, l.act});
  return out;
}

inline std::pair<FactorizedModule, ad::TrainReport> compress_ae_one(
    const ModuleGroup& group, const ad::AeArch& arch_template, ad::LossSpec spec,
    const ad::TrainConfig& cfg, const fisher::FisherWeights* fw,
    const fisher::FisherTransform* transform, double target_cr, Mode mode) {
  const Matrix x = group.stacked();
  const Index n = x.rows();

  const LatentPlan plan = plan_latent_dim(group, target_cr, arch_template);
  ad::AeArch arch = arch_template;
  arch.latent_dim = plan.k;
  arch.encoder.back().width = plan.k;
  arch.input_dim = group.cols();
  arch.decoder.back().width = group.cols();

  if (fw != nullptr) {
    Vector stacked_fisher(n);
    Index r = 0;
    for (const auto& mem : group.members) {
      auto it = fw->rowwise.find(mem.name);
      if (it == fw->rowwise.end())
        throw ShapeError("fisher/member mismatch: no rowwise Fisher for " + mem.name);
      if (it->second.size() != mem.matrix.rows())
        throw ShapeError("fisher/member mismatch: wrong Fisher length for " + mem.name);
      stacked_fisher.segment(r, mem.matrix.rows()) = it->second;
      r += mem.matrix.rows();
    }
    const fisher::FisherTransform t =
        transform != nullptr ? *transform : fisher::FisherTransform{};
    spec.row_weights = fisher::apply_transform(stacked_fisher, t);
    spec.batch_norm_weights = t.batch_norm;
  }

  auto result = ad::train(x, arch, spec, cfg);

  FactorizedModule mod;
  mod.kind = Kind::ae;
  mod.mode = mode;
  mod.latent = ad::run_coder(result.params.encoder, x);
  mod.decoder = to_decoder_layers(result.params.decoder);
  if (arch.preserve_norm) mod.stored_row_norms = x.rowwise().norm();
  mod.original_rows = n;
  mod.original_cols = group.cols();
  Index r = 0;
  for (const auto& mem : group.members) {
    mod.member_offsets.push_back({mem.name, r, mem.matrix.rows()});
    r += mem.matrix.rows();
  }
  return {std::move(mod), std::move(result.report)};
}

}  // namespace detail

/// Concatenated mode trains one autoencoder over the stacked members (one
/// shared decoder); separated mode trains one per member with identical
/// configs, optionally on a bounded worker pool.
inline AeCompressResult compress_ae(const ModuleGroup& group, const ad::AeArch& arch_template,
                                    const ad::LossSpec& spec, const ad::TrainConfig& cfg,
                                    const fisher::FisherWeights* fw,
                                    const fisher::FisherTransform* transform, double target_cr,
                                    int jobs = 1) {
  group.validate();
  AeCompressResult out;
  if (group.mode == Mode::concatenated) {
    auto [mod, report] = detail::compress_ae_one(group, arch_template, spec, cfg, fw, transform,
                                                 target_cr, Mode::concatenated);
    out.modules.push_back(std::move(mod));
    out.reports.push_back(std::move(report));
    return out;
  }

  const std::size_t n_jobs = group.members.size();
  out.modules.resize(n_jobs);
  out.reports.resize(n_jobs);
  std::exception_ptr first_error;
  std::mutex error_mutex;

  auto run_member = [&](std::size_t i) {
    try {
      ModuleGroup single;
      single.mode = Mode::separated;
      single.members.push_back(group.members[i]);
      auto [mod, report] = detail::compress_ae_one(single, arch_template, spec, cfg, fw,
                                                   transform, target_cr, Mode::separated);
      out.modules[i] = std::move(mod);
      out.reports[i] = std::move(report);
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mutex);
      if (!first_error) first_error = std::current_exception();
    }
  };

  if (jobs <= 1 || n_jobs <= 1) {
    for (std::size_t i = 0; i < n_jobs; ++i) run_member(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(jobs), n_jobs);
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < n_jobs; i = next.fetch_add(1)) run_member(i);
      });
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  return out;
}

}  // namespace matcrush::compress

#endif  // MATCRUSH_COMPRESS_HPP_
