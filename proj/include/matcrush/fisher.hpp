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
// Empirical Fisher information for target matrices: mean squared gradient of
// the task loss over dataset batches, its row-wise sqrt-of-sum reduction, and
// the transformation family applied before use as loss weights.

#ifndef MATCRUSH_FISHER_HPP_
#define MATCRUSH_FISHER_HPP_

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "matcrush/common.hpp"
#include "matcrush/tensor_io.hpp"

namespace matcrush::fisher {

using json = nlohmann::json;

inline constexpr double kLogEps = 1e-12;

/// out[i] = sqrt(sum_j in[i][j]).
inline Vector rowwise_diag(const Matrix& elementwise) {
  if (elementwise.minCoeff() < 0.0)
    throw ShapeError("rowwise_diag: negative input");
  return elementwise.rowwise().sum().cwiseSqrt();
}

struct FisherWeights {
  std::map<std::string, Matrix> elementwise;  // mean squared gradients
  std::map<std::string, Vector> rowwise;      // sqrt of row sums
  std::size_t sample_count = 0;

  void validate() const {
    for (const auto& [name, m] : elementwise) {
      if (!all_finite(m) || m.minCoeff() < 0.0)
        throw ShapeError("FisherWeights: non-finite or negative values for " + name);
      auto it = rowwise.find(name);
      if (it == rowwise.end()) throw ShapeError("FisherWeights: missing rowwise for " + name);
      if ((it->second - rowwise_diag(m)).cwiseAbs().maxCoeff() > 1e-12)
        throw ShapeError("FisherWeights: rowwise out of sync for " + name);
    }
  }
};

/// Consumes the gradient oracle over the dataset sequentially (the oracle
/// owns mutable model state) and averages squared gradients. A dataset unit
/// is one batch; |D| = number of batches consumed.
template <class Batch, class Oracle>
FisherWeights estimate_fisher(Oracle&& grad_oracle, const std::vector<Batch>& dataset,
                              const std::set<std::string>& targets) {
  if (dataset.empty()) throw ShapeError("estimate_fisher: empty dataset");
  FisherWeights out;
  for (const Batch& batch : dataset) {
    std::map<std::string, Matrix> grads = grad_oracle(batch);
    for (const std::string& t : targets)
      if (grads.find(t) == grads.end())
        throw ShapeError("estimate_fisher: oracle did not return target " + t);
    for (auto& [name, g] : grads) {
      if (targets.count(name) == 0) continue;
      if (!all_finite(g))
        throw ShapeError("estimate_fisher: non-finite gradient for " + name);
      auto it = out.elementwise.find(name);
      if (it == out.elementwise.end())
        out.elementwise.emplace(name, g.cwiseProduct(g));
      else
        it->second += g.cwiseProduct(g);
    }
    ++out.sample_count;
  }
  for (auto& [name, acc] : out.elementwise) {
    acc /= static_cast<double>(out.sample_count);
    out.rowwise.emplace(name, rowwise_diag(acc));
  }
  return out;
}

struct FisherTransform {
  enum class Kind { vanilla, power, log_shift };
  Kind kind = Kind::vanilla;
  double power_exponent = 1.0;  // the a of x^a; must be > 0
  double log_extra = 0.0;       // the extra constant of log_e(x)+C+extra
  bool batch_norm = false;      // mean-1 rescaling inside each training batch

  void validate() const {
    if (kind == Kind::power && power_exponent <= 0.0)
      throw ConfigError("FisherTransform: power exponent must be > 0");
  }

  json to_json() const {
    json j;
    switch (kind) {
      case Kind::vanilla: j["kind"] = "vanilla"; break;
      case Kind::power:
        j["kind"] = "power";
        j["a"] = power_exponent;
        break;
      case Kind::log_shift:
        j["kind"] = "log_shift";
        j["extra"] = log_extra;
        break;
    }
    j["batch_norm"] = batch_norm;
    return j;
  }

  static FisherTransform from_json(const json& j) {
    FisherTransform t;
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "vanilla") {
      t.kind = Kind::vanilla;
    } else if (kind == "power") {
      t.kind = Kind::power;
      t.power_exponent = j.at("a").get<double>();
    } else if (kind == "log_shift") {
      t.kind = Kind::log_shift;
      t.log_extra = j.value("extra", 0.0);
    } else {
      throw ConfigError("unknown fisher transform kind: " + kind);
    }
    t.batch_norm = j.value("batch_norm", false);
    for (const auto& [key, _] : j.items())
      if (key != "kind" && key != "a" && key != "extra" && key != "batch_norm")
        throw ConfigError("unknown fisher transform key: " + key);
    t.validate();
    return t;
  }
};

/// power(a): v -> v^a (0 stays 0). log_shift(extra): v -> ln(v + 1e-12) + C +
/// extra with C = -min_i ln(v_i + 1e-12) + 1e-12, so all outputs are positive.
/// vanilla: identity. Batch normalization is NOT applied here; it happens per
/// training batch inside the loss.
inline Vector apply_transform(const Vector& values, const FisherTransform& t) {
  if (values.size() == 0) throw ShapeError("apply_transform: empty vector");
  if (!values.allFinite() || values.minCoeff() < 0.0)
    throw ShapeError("apply_transform: values must be finite and non-negative");
  t.validate();
  switch (t.kind) {
    case FisherTransform::Kind::vanilla:
      return values;
    case FisherTransform::Kind::power: {
      Vector out(values.size());
      for (Index i = 0; i < values.size(); ++i) out(i) = std::pow(values(i), t.power_exponent);
      return out;
    }
    case FisherTransform::Kind::log_shift: {
      Vector logs(values.size());
      for (Index i = 0; i < values.size(); ++i) logs(i) = std::log(values(i) + kLogEps);
      const double c = -logs.minCoeff() + kLogEps;
      return (logs.array() + c + t.log_extra).matrix();
    }
  }
  return values;
}

// --- Bundle serialization ---------------------------------------------------
// Elementwise entries live under fisher.elem.<name>, rowwise (as n x 1
// matrices) under fisher.row.<name>; the manifest carries sample_count.

inline io::TensorBundle to_bundle(const FisherWeights& fw, std::uint64_t seed = 0) {
  fw.validate();
  io::TensorBundle bundle;
  bundle.manifest.seed = seed;
  bundle.manifest.producer = "matcrush fisher";
  bundle.manifest.extra["sample_count"] = fw.sample_count;
  for (const auto& [name, m] : fw.elementwise) bundle.add("fisher.elem." + name, m);
  for (const auto& [name, v] : fw.rowwise) bundle.add("fisher.row." + name, Matrix(v));
  return bundle;
}

inline FisherWeights from_bundle(const io::TensorBundle& bundle) {
  FisherWeights fw;
  fw.sample_count = bundle.manifest.extra.value("sample_count", std::size_t{0});
  for (const auto& [name, m] : bundle.entries) {
    if (name.rfind("fisher.elem.", 0) == 0)
      fw.elementwise.emplace(name.substr(12), m);
    else if (name.rfind("fisher.row.", 0) == 0)
      fw.rowwise.emplace(name.substr(11), Vector(m.col(0)));
  }
  fw.validate();
  return fw;
}

}  // namespace matcrush::fisher

#endif  // MATCRUSH_FISHER_HPP_
