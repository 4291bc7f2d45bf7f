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
// Reverse-mode differentiation over matrix-valued nodes, an Adam optimizer,
// and the autoencoder forward/loss/training stack built on top of them.

#ifndef MATCRUSH_AUTODIFF_HPP_
#define MATCRUSH_AUTODIFF_HPP_

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "matcrush/common.hpp"
#include "matcrush/linalg.hpp"
#include "matcrush/rng.hpp"

namespace matcrush::ad {

using json = nlohmann::json;

inline constexpr double kLeakyReluSlope = 0.01;
inline constexpr double kNormEps = linalg::kZeroNormEps;

enum class Activation { identity, leaky_relu, tanh };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::tanh: return "tanh";
  }
  return "identity";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "leaky_relu") return Activation::leaky_relu;
  if (s == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation: " + s);
}

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

/// Named parameter matrices plus their gradient and Adam state. One store is
/// exclusively owned by one training job.
struct ParamStore {
  struct Entry {
    std::string name;
    Matrix value;
    Matrix grad;
    Matrix adam_m;
    Matrix adam_v;
    bool track = true;  // accumulate gradients for this entry
  };

  std::vector<Entry> entries;
  std::map<std::string, int> by_name;

  int add(const std::string& name, Matrix init) {
    if (by_name.count(name) != 0) throw ShapeError("duplicate parameter: " + name);
    Entry e;
    e.name = name;
    e.grad = Matrix::Zero(init.rows(), init.cols());
    e.adam_m = Matrix::Zero(init.rows(), init.cols());
    e.adam_v = Matrix::Zero(init.rows(), init.cols());
    e.value = std::move(init);
    entries.push_back(std::move(e));
    const int id = static_cast<int>(entries.size()) - 1;
    by_name.emplace(name, id);
    return id;
  }

  int id_of(const std::string& name) const {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ShapeError("no parameter named: " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return by_name.count(name) != 0; }

  void zero_grads() {
    for (auto& e : entries) e.grad.setZero();
  }
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(double learning_rate, AdamConfig cfg = {}) : lr_(learning_rate), cfg_(cfg) {}

  void set_learning_rate(double lr) { lr_ = lr; }
  double learning_rate() const { return lr_; }

  void step(ParamStore& store) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& e : store.entries) {
      e.adam_m = cfg_.beta1 * e.adam_m + (1.0 - cfg_.beta1) * e.grad;
      e.adam_v = cfg_.beta2 * e.adam_v + (1.0 - cfg_.beta2) * e.grad.cwiseProduct(e.grad);
      e.value.noalias() -=
          (lr_ / bc1) * e.adam_m.cwiseQuotient(((e.adam_v / bc2).cwiseSqrt().array() + cfg_.eps).matrix());
    }
  }

 private:
  double lr_;
  AdamConfig cfg_;
  std::int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class Tape {
 public:
  using Var = int;

  explicit Tape(ParamStore* store = nullptr) : store_(store) {}

  const Matrix& val(Var v) const { return nodes_[static_cast<std::size_t>(v)].value; }

  Matrix& grad_ref(Var v) {
    Node& n = nodes_[static_cast<std::size_t>(v)];
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  const Matrix& grad(Var v) const { return nodes_[static_cast<std::size_t>(v)].grad; }

  bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v)].needs_grad; }

  Var constant(Matrix value) { return push(std::move(value), false, {}); }

  /// Leaf bound to a ParamStore entry; its gradient accumulates there.
  Var param(int param_id) {
    ParamStore::Entry& e = store_->entries[static_cast<std::size_t>(param_id)];
    Var v = push(e.value, true, {});
    nodes_.back().backward = [param_id](Tape& t, Var self) {
      ParamStore::Entry& pe = t.store_->entries[static_cast<std::size_t>(param_id)];
      if (pe.track) pe.grad += t.grad_ref(self);
    };
    return v;
  }

  Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false) {
    const Matrix& ma = val(a);
    const Matrix& mb = val(b);
    Matrix out = (trans_a ? ma.transpose() : ma) * (trans_b ? mb.transpose() : mb);
    Var v = push(std::move(out), needs_grad(a) || needs_grad(b), {a, b});
    nodes_.back().backward = [a, b, trans_a, trans_b](Tape& t, Var self) {
      const Matrix& g = t.grad_ref(self);
      const Matrix& ma2 = t.val(a);
      const Matrix& mb2 = t.val(b);
      if (t.needs_grad(a)) {
        Matrix& da = t.grad_ref(a);
        if (!trans_a && !trans_b) da.noalias() += g * mb2.transpose();
        else if (!trans_a && trans_b) da.noalias() += g * mb2;
        else if (trans_a && !trans_b) da.noalias() += mb2 * g.transpose();
        else da.noalias() += mb2.transpose() * g.transpose();
      }
      if (t.needs_grad(b)) {
        Matrix& db = t.grad_ref(b);
        if (!trans_b && !trans_a) db.noalias() += ma2.transpose() * g;
        else if (!trans_b && trans_a) db.noalias() += ma2 * g;
        else if (trans_b && !trans_a) db.noalias() += g.transpose() * ma2;
        else db.noalias() += g.transpose() * ma2.transpose();
      }
    };
    return v;
  }

  Var add(Var a, Var b) {
    Matrix out = val(a) + val(b);
    Var v = push(std::move(out), needs_grad(a) || needs_grad(b), {a, b});
    nodes_.back().backward = [a, b](Tape& t, Var self) {
      const Matrix& g = t.grad_ref(self);
      if (t.needs_grad(a)) t.grad_ref(a) += g;
      if (t.needs_grad(b)) t.grad_ref(b) += g;
    };
    return v;
  }

  Var scale(Var a, double c) {
    Matrix out = c * val(a);
    Var v = push(std::move(out), needs_grad(a), {a});
    nodes_.back().backward = [a, c](Tape& t, Var self) {
      if (t.needs_grad(a)) t.grad_ref(a) += c * t.grad_ref(self);
    };
    return v;
  }

  /// Broadcast-add a 1 x m bias row to every row of a.
  Var add_rowvec(Var a, Var bias) {
    const Matrix& ma = val(a);
    Matrix out = ma.rowwise() + val(bias).row(0);
    Var v = push(std::move(out), needs_grad(a) || needs_grad(bias), {a, bias});
    nodes_.back().backward = [a, bias](Tape& t, Var self) {
      const Matrix& g = t.grad_ref(self);
      if (t.needs_grad(a)) t.grad_ref(a) += g;
      if (t.needs_grad(bias)) t.grad_ref(bias).row(0) += g.colwise().sum();
    };
    return v;
  }

  Var activation(Var a, Activation act) {
    if (act == Activation::identity) return a;
    const Matrix& ma = val(a);
    Matrix out;
    if (act == Activation::leaky_relu)
      out = ma.unaryExpr([](double x) { return x > 0.0 ? x : kLeakyReluSlope * x; });
    else
      out = ma.array().tanh().matrix();
    Var v = push(std::move(out), needs_grad(a), {a});
    nodes_.back().backward = [a, act](Tape& t, Var self) {
      if (!t.needs_grad(a)) return;
      const Matrix& g = t.grad_ref(self);
      if (act == Activation::leaky_relu) {
        const Matrix& x = t.val(a);
        t.grad_ref(a) +=
            g.cwiseProduct(x.unaryExpr([](double v2) { return v2 > 0.0 ? 1.0 : kLeakyReluSlope; }));
      } else {
        const Matrix& y = t.val(self);
        t.grad_ref(a) += g.cwiseProduct((1.0 - y.array().square()).matrix());
      }
    };
    return v;
  }

  /// Rescales each row of a to the target norm. Rows whose target or current
  /// norm is below 1e-12 pass through unscaled. Differentiable: the optimizer
  /// sees the rescaled objective, not a post-hoc fixup.
  Var rescale_rows_to_norms(Var a, Vector target_norms) {
    const Matrix& ma = val(a);
    if (target_norms.size() != ma.rows())
      throw ShapeError("rescale_rows_to_norms: norm vector length mismatch");
    Matrix out = ma;
    for (Index i = 0; i < ma.rows(); ++i) {
      const double r = ma.row(i).norm();
      const double tgt = target_norms(i);
      if (tgt >= kNormEps && r >= kNormEps) out.row(i) *= tgt / r;
    }
    Var v = push(std::move(out), needs_grad(a), {a});
    nodes_.back().backward = [a, t = std::move(target_norms)](Tape& tp, Var self) {
      if (!tp.needs_grad(a)) return;
      const Matrix& g = tp.grad_ref(self);
      const Matrix& x = tp.val(a);
      Matrix& dx = tp.grad_ref(a);
      for (Index i = 0; i < x.rows(); ++i) {
        const double r = x.row(i).norm();
        if (t(i) < kNormEps || r < kNormEps) {
          dx.row(i) += g.row(i);
          continue;
        }
        const double s = t(i) / r;
        const Eigen::RowVectorXd unit = x.row(i) / r;
        dx.row(i) += s * (g.row(i) - (g.row(i).dot(unit)) * unit);
      }
    };
    return v;
  }

  /// Picks rows of a ParamStore table; gradient scatter-adds back.
  Var gather_rows(int param_id, std::vector<Index> ids) {
    const Matrix& table = store_->entries[static_cast<std::size_t>(param_id)].value;
    Matrix out(static_cast<Index>(ids.size()), table.cols());
    for (std::size_t r = 0; r < ids.size(); ++r) out.row(static_cast<Index>(r)) = table.row(ids[r]);
    Var v = push(std::move(out), true, {});
    nodes_.back().backward = [param_id, ids = std::move(ids)](Tape& t, Var self) {
      ParamStore::Entry& pe = t.store_->entries[static_cast<std::size_t>(param_id)];
      if (!pe.track) return;
      const Matrix& g = t.grad_ref(self);
      for (std::size_t r = 0; r < ids.size(); ++r)
        pe.grad.row(ids[r]) += g.row(static_cast<Index>(r));
    };
    return v;
  }

  Var block(Var a, Index r0, Index c0, Index rows, Index cols) {
    Matrix out = val(a).block(r0, c0, rows, cols);
    Var v = push(std::move(out), needs_grad(a), {a});
    nodes_.back().backward = [a, r0, c0, rows, cols](Tape& t, Var self) {
      if (t.needs_grad(a)) t.grad_ref(a).block(r0, c0, rows, cols) += t.grad_ref(self);
    };
    return v;
  }

  Var hstack(std::vector<Var> parts) {
    Index cols = 0;
    const Index rows = val(parts.front()).rows();
    for (Var p : parts) cols += val(p).cols();
    Matrix out(rows, cols);
    Index c = 0;
    bool any = false;
    for (Var p : parts) {
      out.middleCols(c, val(p).cols()) = val(p);
      c += val(p).cols();
      any = any || needs_grad(p);
    }
    Var v = push(std::move(out), any, parts);
    nodes_.back().backward = [parts = std::move(parts)](Tape& t, Var self) {
      const Matrix& g = t.grad_ref(self);
      Index c2 = 0;
      for (Var p : parts) {
        const Index w = t.val(p).cols();
        if (t.needs_grad(p)) t.grad_ref(p) += g.middleCols(c2, w);
        c2 += w;
      }
    };
    return v;
  }

  Var vstack(std::vector<Var> parts) {
    Index rows = 0;
    const Index cols = val(parts.front()).cols();
    for (Var p : parts) rows += val(p).rows();
    Matrix out(rows, cols);
    Index r = 0;
    bool any = false;
    for (Var p : parts) {
      out.middleRows(r, val(p).rows()) = val(p);
      r += val(p).rows();
      any = any || needs_grad(p);
    }
    Var v = push(std::move(out), any, parts);
    nodes_.back().backward = [parts = std::move(parts)](Tape& t, Var self) {
      const Matrix& g = t.grad_ref(self);
      Index r2 = 0;
      for (Var p : parts) {
        const Index h = t.val(p).rows();
        if (t.needs_grad(p)) t.grad_ref(p) += g.middleRows(r2, h);
        r2 += h;
      }
    };
    return v;
  }

  Var softmax_rows(Var a) {
    const Matrix& x = val(a);
    Matrix out(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i) {
      const double mx = x.row(i).maxCoeff();
      Eigen::RowVectorXd e = (x.row(i).array() - mx).exp();
      out.row(i) = e / e.sum();
    }
    Var v = push(std::move(out), needs_grad(a), {a});
    nodes_.back().backward = [a](Tape& t, Var self) {
      if (!t.needs_grad(a)) return;
      const Matrix& y = t.val(self);
      const Matrix& g = t.grad_ref(self);
      Matrix& dx = t.grad_ref(a);
      for (Index i = 0; i < y.rows(); ++i) {
        const double dot = g.row(i).dot(y.row(i));
        dx.row(i) += y.row(i).cwiseProduct(g.row(i) - Eigen::RowVectorXd::Constant(y.cols(), dot));
      }
    };
    return v;
  }

  /// Row-wise layer norm with learnable gain/bias (1 x m parameters).
  Var layer_norm(Var a, Var gamma, Var beta, double eps = 1e-5) {
    const Matrix& x = val(a);
    const Index m = x.cols();
    Matrix xhat(x.rows(), m);
    Vector inv_std(x.rows());
    for (Index i = 0; i < x.rows(); ++i) {
      const double mu = x.row(i).mean();
      const double var = (x.row(i).array() - mu).square().mean();
      inv_std(i) = 1.0 / std::sqrt(var + eps);
      xhat.row(i) = (x.row(i).array() - mu) * inv_std(i);
    }
    Matrix out = (xhat.array().rowwise() * val(gamma).row(0).array()).matrix();
    out.rowwise() += val(beta).row(0);
    Var v = push(std::move(out), true, {a, gamma, beta});
    nodes_.back().backward = [a, gamma, beta, xhat = std::move(xhat),
                              inv_std = std::move(inv_std)](Tape& t, Var self) {
      const Matrix& g = t.grad_ref(self);
      if (t.needs_grad(gamma))
        t.grad_ref(gamma).row(0) += g.cwiseProduct(xhat).colwise().sum();
      if (t.needs_grad(beta)) t.grad_ref(beta).row(0) += g.colwise().sum();
      if (!t.needs_grad(a)) return;
      const Eigen::RowVectorXd gam = t.val(gamma).row(0);
      Matrix& dx = t.grad_ref(a);
      for (Index i = 0; i < g.rows(); ++i) {
        const Eigen::RowVectorXd dxhat = g.row(i).cwiseProduct(gam);
        const double m1 = dxhat.mean();
        const double m2 = dxhat.cwiseProduct(xhat.row(i)).mean();
        dx.row(i) +=
            inv_std(i) * (dxhat - Eigen::RowVectorXd::Constant(dxhat.cols(), m1) - xhat.row(i) * m2);
      }
    };
    return v;
  }

  /// Mean cross-entropy over rows flagged in `mask` (1 = predict this row).
  Var masked_cross_entropy(Var logits, std::vector<Index> targets, std::vector<char> mask) {
    const Matrix& l = val(logits);
    if (static_cast<Index>(targets.size()) != l.rows() ||
        static_cast<Index>(mask.size()) != l.rows())
      throw ShapeError("masked_cross_entropy: target/mask length mismatch");
    double total = 0.0;
    Index count = 0;
    for (Index i = 0; i < l.rows(); ++i) {
      if (!mask[static_cast<std::size_t>(i)]) continue;
      const double mx = l.row(i).maxCoeff();
      const double lse = mx + std::log((l.row(i).array() - mx).exp().sum());
      total += lse - l(i, targets[static_cast<std::size_t>(i)]);
      ++count;
    }
    if (count == 0) throw ShapeError("masked_cross_entropy: no masked rows");
    Matrix out(1, 1);
    out(0, 0) = total / static_cast<double>(count);
    Var v = push(std::move(out), needs_grad(logits), {logits});
    nodes_.back().backward = [logits, targets = std::move(targets), mask = std::move(mask),
                              count](Tape& t, Var self) {
      if (!t.needs_grad(logits)) return;
      const double gscale = t.grad_ref(self)(0, 0) / static_cast<double>(count);
      const Matrix& l2 = t.val(logits);
      Matrix& dl = t.grad_ref(logits);
      for (Index i = 0; i < l2.rows(); ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        const double mx = l2.row(i).maxCoeff();
        Eigen::RowVectorXd p = (l2.row(i).array() - mx).exp();
        p /= p.sum();
        dl.row(i) += gscale * p;
        dl(i, targets[static_cast<std::size_t>(i)]) -= gscale;
      }
    };
    return v;
  }

  /// The reconstruction objective: (1-beta) * weighted rmse + beta * weighted
  /// mean cosine distance. `row_weights` must already carry any batch
  /// normalization; uniform weighting is all-ones.
  Var recon_loss(Var x, Var recon, Vector row_weights, double beta);

  /// Seeds d(loss)=1 and walks the tape backwards; parameter gradients land
  /// in the bound ParamStore.
  void backward(Var loss) {
    Node& top = nodes_[static_cast<std::size_t>(loss)];
    if (top.value.size() != 1) throw ShapeError("backward: loss must be scalar");
    grad_ref(loss)(0, 0) = 1.0;
    for (int i = loss; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && n.grad.size() != 0) n.backward(*this, i);
    }
  }

  ParamStore* store() { return store_; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    std::function<void(Tape&, Var)> backward;
  };

  Var push(Matrix value, bool needs, std::vector<Var> /*parents*/) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs;
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  ParamStore* store_;
};

namespace detail {

/// Shared forward math for the reconstruction loss; the tape op and the
/// public loss_eval must agree bit-for-bit.
inline double recon_loss_value(const Matrix& x, const Matrix& recon, const Vector& w,
                               double beta, double* out_wrmse = nullptr) {
  const Index b = x.rows();
  const Index m = x.cols();
  double sum_sq = 0.0;
  double sum_cd = 0.0;
  for (Index i = 0; i < b; ++i) {
    sum_sq += w(i) * (recon.row(i) - x.row(i)).squaredNorm();
    const double nx = x.row(i).norm();
    const double nr = recon.row(i).norm();
    if (nx >= kNormEps && nr >= kNormEps)
      sum_cd += w(i) * (1.0 - x.row(i).dot(recon.row(i)) / (nx * nr));
  }
  const double wrmse = std::sqrt(sum_sq / (static_cast<double>(b) * static_cast<double>(m)));
  const double wcd = sum_cd / static_cast<double>(b);
  if (out_wrmse != nullptr) *out_wrmse = wrmse;
  return (1.0 - beta) * wrmse + beta * wcd;
}

}  // namespace detail

inline Tape::Var Tape::recon_loss(Var x, Var recon, Vector row_weights, double beta) {
  const Matrix& mx = val(x);
  const Matrix& mr = val(recon);
  if (mx.rows() != mr.rows() || mx.cols() != mr.cols())
    throw ShapeError("recon_loss: shape mismatch");
  if (row_weights.size() != mx.rows())
    throw ShapeError("recon_loss: weight length mismatch");
  double wrmse = 0.0;
  Matrix out(1, 1);
  out(0, 0) = detail::recon_loss_value(mx, mr, row_weights, beta, &wrmse);
  Var v = push(std::move(out), needs_grad(recon), {x, recon});
  nodes_.back().backward = [x, recon, w = std::move(row_weights), beta, wrmse](Tape& t,
                                                                               Var self) {
    if (!t.needs_grad(recon)) return;
    const double g = t.grad_ref(self)(0, 0);
    const Matrix& mx2 = t.val(x);
    const Matrix& mr2 = t.val(recon);
    const Index b = mx2.rows();
    const Index m = mx2.cols();
    Matrix& dr = t.grad_ref(recon);
    const double bm = static_cast<double>(b) * static_cast<double>(m);
    for (Index i = 0; i < b; ++i) {
      if (wrmse > 0.0)
        dr.row(i) += g * (1.0 - beta) * w(i) / (bm * wrmse) * (mr2.row(i) - mx2.row(i));
      if (beta != 0.0) {
        const double nx = mx2.row(i).norm();
        const double nr = mr2.row(i).norm();
        if (nx >= kNormEps && nr >= kNormEps) {
          const double cos = mx2.row(i).dot(mr2.row(i)) / (nx * nr);
          dr.row(i) += g * beta * w(i) / static_cast<double>(b) *
                       (-mx2.row(i) / (nx * nr) + cos / (nr * nr) * mr2.row(i));
        }
      }
    }
  };
  return v;
}

// ---------------------------------------------------------------------------
// Autoencoder
// ---------------------------------------------------------------------------

struct LayerSpec {
  Index width = 0;
  Activation act = Activation::identity;
};

/// Encoder/decoder layer lists include the output layer, so a linear coder is
/// exactly one identity-activated layer.
struct AeArch {
  Index input_dim = 0;
  Index latent_dim = 0;
  std::vector<LayerSpec> encoder;
  std::vector<LayerSpec> decoder;
  bool preserve_norm = false;

  static AeArch linear(Index input_dim, Index latent_dim, bool preserve_norm = false) {
    AeArch a;
    a.input_dim = input_dim;
    a.latent_dim = latent_dim;
    a.encoder = {{latent_dim, Activation::identity}};
    a.decoder = {{input_dim, Activation::identity}};
    a.preserve_norm = preserve_norm;
    return a;
  }

  /// Symmetric non-linear coder with the given hidden widths on both sides.
  static AeArch nonlinear(Index input_dim, Index latent_dim, std::vector<Index> hidden,
                          Activation act, bool preserve_norm = false) {
    AeArch a;
    a.input_dim = input_dim;
    a.latent_dim = latent_dim;
    a.preserve_norm = preserve_norm;
    for (Index h : hidden) a.encoder.push_back({h, act});
    a.encoder.push_back({latent_dim, Activation::identity});
    for (auto it = hidden.rbegin(); it != hidden.rend(); ++it) a.decoder.push_back({*it, act});
    a.decoder.push_back({input_dim, Activation::identity});
    return a;
  }

  bool is_linear() const {
    return encoder.size() == 1 && decoder.size() == 1 &&
           encoder[0].act == Activation::identity && decoder[0].act == Activation::identity;
  }

  void validate() const {
    if (input_dim < 1 || latent_dim < 1) throw ShapeError("AeArch: dims must be >= 1");
    if (encoder.empty() || decoder.empty())
      throw ShapeError("AeArch: coder specs must include an output layer");
    if (encoder.back().width != latent_dim)
      throw ShapeError("AeArch: encoder output width must equal latent_dim");
    if (decoder.back().width != input_dim)
      throw ShapeError("AeArch: decoder output width must equal input_dim");
    for (const auto& l : encoder)
      if (l.width < 1) throw ShapeError("AeArch: non-positive layer width");
    for (const auto& l : decoder)
      if (l.width < 1) throw ShapeError("AeArch: non-positive layer width");
  }

  json to_json() const {
    auto layers = [](const std::vector<LayerSpec>& ls) {
      json arr = json::array();
      for (const auto& l : ls) arr.push_back({{"width", l.width}, {"activation", to_string(l.act)}});
      return arr;
    };
    return {{"input_dim", input_dim},
            {"latent_dim", latent_dim},
            {"encoder", layers(encoder)},
            {"decoder", layers(decoder)},
            {"preserve_norm", preserve_norm}};
  }
};

/// y = x * W^T + b per layer, W is (out x in).
struct LayerParams {
  Matrix w;
  Vector b;
  Activation act = Activation::identity;

  std::size_t param_count() const {
    return static_cast<std::size_t>(w.size()) + static_cast<std::size_t>(b.size());
  }
};

struct AeParams {
  std::vector<LayerParams> encoder;
  std::vector<LayerParams> decoder;

  std::size_t decoder_param_count() const {
    std::size_t c = 0;
    for (const auto& l : decoder) c += l.param_count();
    return c;
  }
};

struct LossSpec {
  double beta = 0.0;
  std::optional<Vector> row_weights;
  bool batch_norm_weights = false;

  void validate(Index n_rows) const {
    if (beta < 0.0 || beta > 1.0) throw ShapeError("LossSpec: beta must be in [0,1]");
    if (row_weights) {
      if (row_weights->size() != n_rows)
        throw ShapeError("LossSpec: row_weights length must match matrix rows");
      if (!row_weights->allFinite() || row_weights->minCoeff() < 0.0)
        throw ShapeError("LossSpec: row_weights must be finite and non-negative");
    }
  }

  json to_json() const {
    return {{"beta", beta},
            {"has_row_weights", row_weights.has_value()},
            {"batch_norm_weights", batch_norm_weights}};
  }
};

struct TrainConfig {
  double learning_rate = 1e-3;
  AdamConfig adam;
  Index batch_size = 256;
  std::int64_t max_steps = 20000;
  int patience = 20;             // evaluations without improvement
  std::int64_t eval_every = 100;
  std::uint64_t seed = 0;

  void validate() const {
    if (learning_rate <= 0.0) throw ShapeError("TrainConfig: learning_rate must be > 0");
    if (batch_size < 1) throw ShapeError("TrainConfig: batch_size must be >= 1");
    if (max_steps < 1) throw ShapeError("TrainConfig: max_steps must be >= 1");
  }

  json to_json() const {
    return {{"learning_rate", learning_rate},
            {"adam", {{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}}},
            {"batch_size", batch_size},
            {"max_steps", max_steps},
            {"patience", patience},
            {"eval_every", eval_every},
            {"seed", seed}};
  }
};

struct TrainReport {
  std::vector<double> loss_curve;  // full-matrix loss at each evaluation
  std::int64_t steps_run = 0;
  double best_loss = 0.0;
  double wall_time_sec = 0.0;  // in-memory only; see to_json
  std::uint64_t seed = 0;
  json config_echo;

  // Wall time stays out of the serialized form so identical reruns produce
  // byte-identical reports.
  json to_json() const {
    return {{"loss_curve", loss_curve},
            {"steps_run", steps_run},
            {"best_loss", best_loss},
            {"seed", seed},
            {"config", config_echo}};
  }
};

namespace detail {

inline Matrix glorot_uniform(Rng& rng, Index out, Index in) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  return rng.uniform_matrix(out, in, -bound, bound);
}

}  // namespace detail

inline AeParams init_ae_params(const AeArch& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(derive_seed(seed, 0xae));
  AeParams p;
  Index in = arch.input_dim;
  for (const auto& l : arch.encoder) {
    p.encoder.push_back({detail::glorot_uniform(rng, l.width, in), Vector::Zero(l.width), l.act});
    in = l.width;
  }
  in = arch.latent_dim;
  for (const auto& l : arch.decoder) {
    p.decoder.push_back({detail::glorot_uniform(rng, l.width, in), Vector::Zero(l.width), l.act});
    in = l.width;
  }
  return p;
}

inline Matrix run_coder(const std::vector<LayerParams>& layers, const Matrix& x) {
  Matrix h = x;
  for (const auto& l : layers) {
    h = (h * l.w.transpose()).rowwise() + l.b.transpose();
    if (l.act == Activation::leaky_relu)
      h = h.unaryExpr([](double v) { return v > 0.0 ? v : kLeakyReluSlope * v; });
    else if (l.act == Activation::tanh)
      h = h.array().tanh().matrix();
  }
  return h;
}

/// Applies the preserve-norm layer outside the tape (materialization path).
inline Matrix rescale_rows_to_norms(Matrix recon, const Vector& target_norms) {
  for (Index i = 0; i < recon.rows(); ++i) {
    const double r = recon.row(i).norm();
    if (target_norms(i) >= kNormEps && r >= kNormEps) recon.row(i) *= target_norms(i) / r;
  }
  return recon;
}

struct AeForwardResult {
  Matrix latent;
  Matrix recon;
};

inline AeForwardResult ae_forward(const AeParams& params, const AeArch& arch, const Matrix& x) {
  arch.validate();
  if (x.cols() != arch.input_dim) throw ShapeError("ae_forward: input width mismatch");
  AeForwardResult r;
  r.latent = run_coder(params.encoder, x);
  r.recon = run_coder(params.decoder, r.latent);
  if (arch.preserve_norm) r.recon = rescale_rows_to_norms(std::move(r.recon), x.rowwise().norm());
  return r;
}

namespace detail {

/// Effective per-row weights for one batch: spec weights (or ones) with
/// optional mean-1 batch normalization. A constant weight vector normalizes
/// to exactly 1 (sum/n would round), so uniform Fisher with batch norm is
/// bit-identical to the unweighted loss.
inline Vector batch_weights(const LossSpec& spec, const std::vector<Index>* rows, Index b) {
  Vector w(b);
  if (spec.row_weights) {
    if (rows != nullptr)
      for (Index i = 0; i < b; ++i) w(i) = (*spec.row_weights)((*rows)[static_cast<std::size_t>(i)]);
    else
      w = *spec.row_weights;
  } else {
    w.setOnes();
  }
  if (spec.batch_norm_weights) {
    if (w.minCoeff() == w.maxCoeff()) {
      if (w(0) > 0.0) w.setOnes();
    } else {
      const double mean = w.mean();
      if (mean > 0.0) w /= mean;
    }
  }
  return w;
}

struct TapeForward {
  Tape::Var latent;
  Tape::Var recon;
  std::vector<int> param_ids;  // enc then dec, w/b interleaved
};

inline TapeForward ae_forward_tape(Tape& tape, ParamStore& store, const AeArch& arch,
                                   const Matrix& x) {
  TapeForward out;
  Tape::Var h = tape.constant(x);
  auto run = [&](const char* prefix, std::size_t n_layers, Tape::Var input) {
    Tape::Var cur = input;
    for (std::size_t li = 0; li < n_layers; ++li) {
      const int wid = store.id_of(std::string(prefix) + "." + std::to_string(li) + ".w");
      const int bid = store.id_of(std::string(prefix) + "." + std::to_string(li) + ".b");
      out.param_ids.push_back(wid);
      out.param_ids.push_back(bid);
      Tape::Var w = tape.param(wid);
      Tape::Var b = tape.param(bid);
      cur = tape.add_rowvec(tape.matmul(cur, w, false, true), b);
      const Activation act = (std::string(prefix) == "enc") ? arch.encoder[li].act : arch.decoder[li].act;
      cur = tape.activation(cur, act);
    }
    return cur;
  };
  out.latent = run("enc", arch.encoder.size(), h);
  out.recon = run("dec", arch.decoder.size(), out.latent);
  if (arch.preserve_norm) out.recon = tape.rescale_rows_to_norms(out.recon, x.rowwise().norm());
  return out;
}

inline ParamStore make_store(const AeParams& p) {
  ParamStore store;
  for (std::size_t i = 0; i < p.encoder.size(); ++i) {
    store.add("enc." + std::to_string(i) + ".w", p.encoder[i].w);
    store.add("enc." + std::to_string(i) + ".b", Matrix(p.encoder[i].b.transpose()));
  }
  for (std::size_t i = 0; i < p.decoder.size(); ++i) {
    store.add("dec." + std::to_string(i) + ".w", p.decoder[i].w);
    store.add("dec." + std::to_string(i) + ".b", Matrix(p.decoder[i].b.transpose()));
  }
  return store;
}

inline AeParams from_store(const ParamStore& store, const AeArch& arch) {
  AeParams p;
  for (std::size_t i = 0; i < arch.encoder.size(); ++i) {
    LayerParams l;
    l.w = store.entries[static_cast<std::size_t>(store.id_of("enc." + std::to_string(i) + ".w"))].value;
    l.b = store.entries[static_cast<std::size_t>(store.id_of("enc." + std::to_string(i) + ".b"))].value.row(0);
    l.act = arch.encoder[i].act;
    p.encoder.push_back(std::move(l));
  }
  for (std::size_t i = 0; i < arch.decoder.size(); ++i) {
    LayerParams l;
    l.w = store.entries[static_cast<std::size_t>(store.id_of("dec." + std::to_string(i) + ".w"))].value;
    l.b = store.entries[static_cast<std::size_t>(store.id_of("dec." + std::to_string(i) + ".b"))].value.row(0);
    l.act = arch.decoder[i].act;
    p.decoder.push_back(std::move(l));
  }
  return p;
}

}  // namespace detail

/// Loss of a reconstruction under the spec: (1-beta) * weighted rmse +
/// beta * weighted mean cosine distance. Batch normalization (mean-1
/// rescaling) applies to the rows passed here.
inline double loss_eval(const LossSpec& spec, const Matrix& x, const Matrix& recon) {
  if (x.rows() != recon.rows() || x.cols() != recon.cols())
    throw ShapeError("loss_eval: shape mismatch");
  spec.validate(x.rows());
  const Vector w = detail::batch_weights(spec, nullptr, x.rows());
  return detail::recon_loss_value(x, recon, w, spec.beta);
}

/// Exact reverse-mode gradients of loss_eval(ae_forward(...)).
inline AeParams backward(const AeParams& params, const AeArch& arch, const LossSpec& spec,
                         const Matrix& x) {
  arch.validate();
  spec.validate(x.rows());
  ParamStore store = detail::make_store(params);
  Tape tape(&store);
  auto fwd = detail::ae_forward_tape(tape, store, arch, x);
  const Vector w = detail::batch_weights(spec, nullptr, x.rows());
  Tape::Var loss = tape.recon_loss(tape.constant(x), fwd.recon, w, spec.beta);
  tape.backward(loss);
  AeParams grads;
  for (std::size_t i = 0; i < arch.encoder.size(); ++i) {
    LayerParams l;
    l.w = store.entries[static_cast<std::size_t>(store.id_of("enc." + std::to_string(i) + ".w"))].grad;
    l.b = store.entries[static_cast<std::size_t>(store.id_of("enc." + std::to_string(i) + ".b"))].grad.row(0);
    l.act = arch.encoder[i].act;
    grads.encoder.push_back(std::move(l));
  }
  for (std::size_t i = 0; i < arch.decoder.size(); ++i) {
    LayerParams l;
    l.w = store.entries[static_cast<std::size_t>(store.id_of("dec." + std::to_string(i) + ".w"))].grad;
    l.b = store.entries[static_cast<std::size_t>(store.id_of("dec." + std::to_string(i) + ".b"))].grad.row(0);
    l.act = arch.decoder[i].act;
    grads.decoder.push_back(std::move(l));
  }
  return grads;
}

struct TrainResult {
  AeParams params;
  TrainReport report;
};

/// Mini-batch Adam over row batches; rows are reshuffled each epoch with a
/// seeded RNG. Returns the parameters with the best full-matrix loss seen.
/// Deterministic given (x, arch, spec, cfg).
inline TrainResult train(const Matrix& x, const AeArch& arch, const LossSpec& spec,
                         const TrainConfig& cfg) {
  arch.validate();
  cfg.validate();
  spec.validate(x.rows());
  if (x.rows() < 1) throw ShapeError("train: empty input");
  if (x.cols() != arch.input_dim) throw ShapeError("train: input width mismatch");

  const auto t_start = std::chrono::steady_clock::now();
  const Index n = x.rows();
  ParamStore store = detail::make_store(init_ae_params(arch, cfg.seed));
  Adam adam(cfg.learning_rate, cfg.adam);
  Rng shuffle_rng(derive_seed(cfg.seed, 0x5b));

  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::size_t pos = order.size();  // forces a shuffle on first use

  TrainReport report;
  report.seed = cfg.seed;
  report.config_echo = cfg.to_json();

  AeParams best;
  double best_loss = std::numeric_limits<double>::infinity();
  int evals_since_improvement = 0;

  auto evaluate = [&](std::int64_t step) {
    const AeParams cur = detail::from_store(store, arch);
    const auto fwd = ae_forward(cur, arch, x);
    const double full = loss_eval(spec, x, fwd.recon);
    if (!std::isfinite(full))
      throw DivergenceError(step, "training diverged (non-finite loss) at step " + std::to_string(step));
    report.loss_curve.push_back(full);
    if (full < best_loss) {
      best_loss = full;
      best = cur;
      evals_since_improvement = 0;
    } else {
      ++evals_since_improvement;
    }
  };

  evaluate(0);
  std::int64_t step = 0;
  while (step < cfg.max_steps) {
    if (pos >= order.size()) {
      shuffle_rng.shuffle(order);
      pos = 0;
    }
    const std::size_t batch =
        std::min(static_cast<std::size_t>(cfg.batch_size), order.size() - pos);
    std::vector<Index> rows(order.begin() + static_cast<std::ptrdiff_t>(pos),
                            order.begin() + static_cast<std::ptrdiff_t>(pos + batch));
    pos += batch;

    Matrix xb(static_cast<Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) xb.row(static_cast<Index>(i)) = x.row(rows[i]);

    store.zero_grads();
    Tape tape(&store);
    auto fwd = detail::ae_forward_tape(tape, store, arch, xb);
    const Vector w = detail::batch_weights(spec, &rows, static_cast<Index>(rows.size()));
    Tape::Var loss = tape.recon_loss(tape.constant(xb), fwd.recon, w, spec.beta);
    ++step;
    if (!std::isfinite(tape.val(loss)(0, 0)))
      throw DivergenceError(step, "training diverged (non-finite loss) at step " + std::to_string(step));
    tape.backward(loss);
    adam.step(store);

    if (step % cfg.eval_every == 0) {
      evaluate(step);
      if (evals_since_improvement >= cfg.patience) break;
      // The rmse term has constant-magnitude gradients near its floor, so a
      // fixed step size stalls; halve the rate when progress plateaus.
      const int half_patience = std::max(1, cfg.patience / 2);
      if (evals_since_improvement > 0 && evals_since_improvement % half_patience == 0 &&
          adam.learning_rate() > cfg.learning_rate / 1024.0)
        adam.set_learning_rate(adam.learning_rate() * 0.5);
    }
  }
  if (step % cfg.eval_every != 0) evaluate(step);

  report.steps_run = step;
  report.best_loss = best_loss;
  report.wall_time_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return {std::move(best), std::move(report)};
}

}  // namespace matcrush::ad

#endif  // MATCRUSH_AUTODIFF_HPP_
