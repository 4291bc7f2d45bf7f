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
// Experiment configs (strictly validated JSON), compression/evaluation jobs
// over a toy LM, seeded sweeps with per-seed rows and medians, and report
// emission in CSV and JSON. Reports carry no wall-clock fields, so identical
// reruns are byte-identical.

#ifndef MATCRUSH_EXPERIMENT_HPP_
#define MATCRUSH_EXPERIMENT_HPP_

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "matcrush/artifact.hpp"
#include "matcrush/compress.hpp"
#include "matcrush/fisher.hpp"
#include "matcrush/toylm.hpp"

namespace matcrush::experiment {

using json = nlohmann::json;

enum class Method { ae, svd, fwsvd, kronecker, prune };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::ae: return "ae";
    case Method::svd: return "svd";
    case Method::fwsvd: return "fwsvd";
    case Method::kronecker: return "kronecker";
    case Method::prune: return "prune";
  }
  return "ae";
}

inline Method method_from_string(const std::string& s) {
  if (s == "ae") return Method::ae;
  if (s == "svd") return Method::svd;
  if (s == "fwsvd") return Method::fwsvd;
  if (s == "kronecker") return Method::kronecker;
  if (s == "prune") return Method::prune;
  throw ConfigError("unknown method: " + s);
}

namespace detail {

inline void reject_unknown_keys(const json& j, const std::set<std::string>& known,
                                const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (known.count(key) == 0) throw ConfigError("unknown key \"" + key + "\" in " + where);
}

inline std::vector<ad::LayerSpec> parse_hidden(const json& arr, const std::string& where) {
  std::vector<ad::LayerSpec> out;
  if (!arr.is_array()) throw ConfigError(where + " must be an array");
  for (const auto& l : arr) {
    reject_unknown_keys(l, {"width", "activation"}, where);
    ad::LayerSpec spec;
    spec.width = l.at("width").get<Index>();
    spec.act = ad::activation_from_string(l.value("activation", std::string("leaky_relu")));
    if (spec.width < 1) throw ConfigError(where + ": width must be >= 1");
    out.push_back(spec);
  }
  return out;
}

}  // namespace detail

/// One experiment: which matrices, which compressor, which grids. Parsed
/// strictly (unknown keys rejected); schema/experiment_config.schema.json is
/// the published description of this format.
struct ExperimentConfig {
  std::vector<std::string> targets;  // name patterns, '*' wildcard
  compress::Mode mode = compress::Mode::concatenated;
  Method method = Method::ae;

  std::vector<ad::LayerSpec> encoder_hidden;
  std::vector<ad::LayerSpec> decoder_hidden;
  bool preserve_norm = false;

  double beta = 0.0;
  std::optional<fisher::FisherTransform> transform;

  double learning_rate = 1e-3;
  Index batch_size = 256;
  std::int64_t max_steps = 20000;
  int patience = 20;
  std::int64_t eval_every = 100;
  std::vector<std::uint64_t> seeds = {1, 2, 3};

  std::vector<double> target_cr;

  static ExperimentConfig from_json(const json& j) {
    detail::reject_unknown_keys(j, {"targets", "mode", "method", "arch", "loss", "train",
                                    "target_cr"},
                                "config");
    ExperimentConfig c;
    if (!j.contains("targets") || !j.at("targets").is_array() || j.at("targets").empty())
      throw ConfigError("config.targets must be a non-empty array of name patterns");
    for (const auto& t : j.at("targets")) c.targets.push_back(t.get<std::string>());

    const std::string mode = j.value("mode", std::string("concatenated"));
    if (mode == "separated")
      c.mode = compress::Mode::separated;
    else if (mode == "concatenated")
      c.mode = compress::Mode::concatenated;
    else
      throw ConfigError("config.mode must be \"separated\" or \"concatenated\"");

    if (!j.contains("method")) throw ConfigError("config.method is required");
    c.method = method_from_string(j.at("method").get<std::string>());

    if (j.contains("arch")) {
      const json& a = j.at("arch");
      detail::reject_unknown_keys(a, {"encoder_hidden", "decoder_hidden", "preserve_norm"},
                                  "config.arch");
      if (a.contains("encoder_hidden"))
        c.encoder_hidden = detail::parse_hidden(a.at("encoder_hidden"), "config.arch.encoder_hidden");
      if (a.contains("decoder_hidden"))
        c.decoder_hidden = detail::parse_hidden(a.at("decoder_hidden"), "config.arch.decoder_hidden");
      c.preserve_norm = a.value("preserve_norm", false);
    }

    if (j.contains("loss")) {
      const json& l = j.at("loss");
      detail::reject_unknown_keys(l, {"beta", "fisher_transform"}, "config.loss");
      c.beta = l.value("beta", 0.0);
      if (c.beta < 0.0 || c.beta > 1.0) throw ConfigError("config.loss.beta must be in [0,1]");
      if (l.contains("fisher_transform") && !l.at("fisher_transform").is_null())
        c.transform = fisher::FisherTransform::from_json(l.at("fisher_transform"));
    }

    if (j.contains("train")) {
      const json& t = j.at("train");
      detail::reject_unknown_keys(
          t, {"learning_rate", "batch_size", "max_steps", "patience", "eval_every", "seeds"},
          "config.train");
      c.learning_rate = t.value("learning_rate", 1e-3);
      c.batch_size = t.value("batch_size", Index{256});
      c.max_steps = t.value("max_steps", std::int64_t{20000});
      c.patience = t.value("patience", 20);
      c.eval_every = t.value("eval_every", std::int64_t{100});
      if (t.contains("seeds")) {
        c.seeds.clear();
        for (const auto& s : t.at("seeds")) c.seeds.push_back(s.get<std::uint64_t>());
      }
      if (c.learning_rate <= 0.0) throw ConfigError("config.train.learning_rate must be > 0");
      if (c.batch_size < 1) throw ConfigError("config.train.batch_size must be >= 1");
      if (c.seeds.empty()) throw ConfigError("config.train.seeds must be non-empty");
    }

    if (!j.contains("target_cr") || !j.at("target_cr").is_array() || j.at("target_cr").empty())
      throw ConfigError("config.target_cr must be a non-empty array");
    for (const auto& cr : j.at("target_cr")) {
      c.target_cr.push_back(cr.get<double>());
      if (!(c.target_cr.back() >= 1.0))
        throw ConfigError("config.target_cr entries must be >= 1");
    }
    return c;
  }

  json to_json() const {
    auto hidden = [](const std::vector<ad::LayerSpec>& ls) {
      json arr = json::array();
      for (const auto& l : ls)
        arr.push_back({{"width", l.width}, {"activation", ad::to_string(l.act)}});
      return arr;
    };
    json j = {{"targets", targets},
              {"mode", compress::to_string(mode)},
              {"method", to_string(method)},
              {"arch",
               {{"encoder_hidden", hidden(encoder_hidden)},
                {"decoder_hidden", hidden(decoder_hidden)},
                {"preserve_norm", preserve_norm}}},
              {"loss", {{"beta", beta}}},
              {"train",
               {{"learning_rate", learning_rate},
                {"batch_size", batch_size},
                {"max_steps", max_steps},
                {"patience", patience},
                {"eval_every", eval_every},
                {"seeds", seeds}}},
              {"target_cr", target_cr}};
    if (transform)
      j["loss"]["fisher_transform"] = transform->to_json();
    else
      j["loss"]["fisher_transform"] = nullptr;
    return j;
  }

  std::string config_hash() const { return hex64(fnv1a64(to_json().dump())); }

  ad::AeArch arch_for(Index input_dim) const {
    ad::AeArch arch;
    arch.input_dim = input_dim;
    arch.latent_dim = 1;  // planned per group
    arch.encoder = encoder_hidden;
    arch.encoder.push_back({1, ad::Activation::identity});
    arch.decoder = decoder_hidden;
    arch.decoder.push_back({input_dim, ad::Activation::identity});
    arch.preserve_norm = preserve_norm;
    return arch;
  }

  ad::TrainConfig train_config(std::uint64_t seed) const {
    ad::TrainConfig tc;
    tc.learning_rate = learning_rate;
    tc.batch_size = batch_size;
    tc.max_steps = max_steps;
    tc.patience = patience;
    tc.eval_every = eval_every;
    tc.seed = seed;
    return tc;
  }
};

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ConfigError("unparseable config " + path.string() + ": " + e.what());
  }
  return ExperimentConfig::from_json(j);
}

// ---------------------------------------------------------------------------
// Target patterns and grouping
// ---------------------------------------------------------------------------

/// Glob with '*' as the only wildcard.
inline bool pattern_matches(const std::string& pattern, const std::string& name) {
  std::size_t p = 0, n = 0, star = std::string::npos, star_n = 0;
  while (n < name.size()) {
    if (p < pattern.size() && (pattern[p] == name[n])) {
      ++p;
      ++n;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      star_n = n;
    } else if (star != std::string::npos) {
      p = star + 1;
      n = ++star_n;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

/// One group per pattern (lexicographic member order), mirroring the
/// same-type-across-layers grouping of the concatenated mode.
inline std::vector<compress::ModuleGroup> build_groups(const toylm::ToyLm& model,
                                                       const ExperimentConfig& config) {
  std::vector<compress::ModuleGroup> groups;
  for (const std::string& pattern : config.targets) {
    compress::ModuleGroup g;
    g.mode = config.mode;
    std::vector<std::string> names;
    for (const auto& e : model.params.entries)
      if (pattern_matches(pattern, e.name)) names.push_back(e.name);
    std::sort(names.begin(), names.end());
    for (const auto& n : names) g.members.push_back({n, model.matrix(n)});
    if (g.members.empty())
      throw ConfigError("target pattern matches nothing: " + pattern);
    groups.push_back(std::move(g));
  }
  return groups;
}

// ---------------------------------------------------------------------------
// Compression jobs
// ---------------------------------------------------------------------------

struct JobResult {
  compress::CompressedArtifact artifact;
  double recon_rmse_mean = 0.0;  // mean over modules of stacked-reconstruction rmse
};

/// Runs one (config, target_cr, seed) compression over the model's target
/// groups. Baselines (svd/fwsvd/kronecker/prune) always compress each member
/// separately; mode applies to the autoencoder only.
inline JobResult run_compression(const toylm::ToyLm& model, const ExperimentConfig& config,
                                 const fisher::FisherWeights* fw, double target_cr,
                                 std::uint64_t seed) {
  const auto groups = build_groups(model, config);
  JobResult out;
  std::vector<double> rmses;

  auto push_factorized = [&](compress::FactorizedModule mod, const Matrix& original) {
    rmses.push_back(linalg::rmse(original, mod.materialize_all()));
    compress::ArtifactModule am;
    am.factorized = std::move(mod);
    out.artifact.modules.push_back(std::move(am));
  };

  for (const auto& group : groups) {
    switch (config.method) {
      case Method::ae: {
        if (config.transform && fw == nullptr)
          throw ConfigError("config requests a fisher transform but no fisher weights given");
        const auto result = compress::compress_ae(
            group, config.arch_for(group.cols()), ad::LossSpec{config.beta, std::nullopt, false},
            config.train_config(seed), config.transform ? fw : nullptr,
            config.transform ? &*config.transform : nullptr, target_cr);
        for (std::size_t i = 0; i < result.modules.size(); ++i) {
          const Matrix original = result.modules[i].member_offsets.size() == group.members.size()
                                      ? group.stacked()
                                      : group.members[i].matrix;
          push_factorized(result.modules[i], original);
        }
        break;
      }
      case Method::svd:
        for (const auto& mem : group.members)
          push_factorized(compress::compress_svd(mem.matrix, target_cr, mem.name), mem.matrix);
        break;
      case Method::fwsvd: {
        if (fw == nullptr) throw ConfigError("fwsvd requires fisher weights");
        for (const auto& mem : group.members) {
          auto it = fw->rowwise.find(mem.name);
          if (it == fw->rowwise.end())
            throw ConfigError("no fisher weights for target " + mem.name);
          push_factorized(
              compress::compress_fwsvd(mem.matrix, it->second, target_cr, mem.name), mem.matrix);
        }
        break;
      }
      case Method::kronecker:
        for (const auto& mem : group.members)
          push_factorized(
              compress::compress_kronecker(mem.matrix, target_cr, config.train_config(seed),
                                           mem.name),
              mem.matrix);
        break;
      case Method::prune:
        for (const auto& mem : group.members) {
          auto sparse = compress::prune_l1(mem.matrix, target_cr);
          rmses.push_back(linalg::rmse(mem.matrix, sparse.materialize()));
          compress::ArtifactModule am;
          am.sparse = std::move(sparse);
          am.sparse_member = mem.name;
          out.artifact.modules.push_back(std::move(am));
        }
        break;
    }
  }
  double total = 0.0;
  for (double r : rmses) total += r;
  out.recon_rmse_mean = rmses.empty() ? 0.0 : total / static_cast<double>(rmses.size());
  out.artifact.meta = {{"method", to_string(config.method)},
                       {"mode", compress::to_string(config.mode)},
                       {"target_cr", target_cr},
                       {"seed", seed},
                       {"config_hash", config.config_hash()},
                       {"achieved_cr", out.artifact.overall_compression_ratio()}};
  return out;
}

/// Applies every member's materialization to a copy of the model.
inline toylm::ToyLm apply_artifact(const toylm::ToyLm& model,
                                   const compress::CompressedArtifact& artifact) {
  toylm::ToyLm out = model;
  for (const auto& am : artifact.modules)
    for (const auto& name : am.member_names())
      out = toylm::substitute(out, name, am.materialize_member(name));
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct SweepRow {
  double target_cr = 0.0;
  std::uint64_t seed = 0;
  double achieved_cr = 0.0;
  double ppl_baseline = 0.0;
  double ppl_compressed = 0.0;
  double recon_rmse_mean = 0.0;
};

struct SweepMedianRow {
  double target_cr = 0.0;
  double achieved_cr_median = 0.0;
  double ppl_compressed_median = 0.0;
  double recon_rmse_median = 0.0;
};

struct SweepReport {
  json config_echo;
  std::string config_hash;
  std::uint64_t eval_mask_seed = 0;
  std::vector<SweepRow> rows;
  std::vector<SweepMedianRow> medians;

  json to_json() const {
    json rows_json = json::array();
    for (const auto& r : rows)
      rows_json.push_back({{"target_cr", r.target_cr},
                           {"seed", r.seed},
                           {"config_hash", config_hash},
                           {"achieved_cr", r.achieved_cr},
                           {"ppl_baseline", r.ppl_baseline},
                           {"ppl_compressed", r.ppl_compressed},
                           {"recon_rmse_mean", r.recon_rmse_mean}});
    json med_json = json::array();
    for (const auto& m : medians)
      med_json.push_back({{"target_cr", m.target_cr},
                          {"achieved_cr_median", m.achieved_cr_median},
                          {"ppl_compressed_median", m.ppl_compressed_median},
                          {"recon_rmse_median", m.recon_rmse_median}});
    return {{"config", config_echo},
            {"config_hash", config_hash},
            {"eval_mask_seed", eval_mask_seed},
            {"rows", rows_json},
            {"medians", med_json}};
  }

  static SweepReport from_json(const json& j) {
    SweepReport r;
    r.config_echo = j.at("config");
    r.config_hash = j.at("config_hash").get<std::string>();
    r.eval_mask_seed = j.at("eval_mask_seed").get<std::uint64_t>();
    for (const auto& row : j.at("rows")) {
      SweepRow s;
      s.target_cr = row.at("target_cr").get<double>();
      s.seed = row.at("seed").get<std::uint64_t>();
      s.achieved_cr = row.at("achieved_cr").get<double>();
      s.ppl_baseline = row.at("ppl_baseline").get<double>();
      s.ppl_compressed = row.at("ppl_compressed").get<double>();
      s.recon_rmse_mean = row.at("recon_rmse_mean").get<double>();
      r.rows.push_back(s);
    }
    for (const auto& med : j.at("medians")) {
      SweepMedianRow m;
      m.target_cr = med.at("target_cr").get<double>();
      m.achieved_cr_median = med.at("achieved_cr_median").get<double>();
      m.ppl_compressed_median = med.at("ppl_compressed_median").get<double>();
      m.recon_rmse_median = med.at("recon_rmse_median").get<double>();
      r.medians.push_back(m);
    }
    return r;
  }
};

inline double median(std::vector<double> values) {
  if (values.empty()) throw ShapeError("median of empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

/// Grid = target_cr x seeds. Points run on a bounded worker pool; the rows
/// come out in grid order regardless of scheduling. Evaluation masks are
/// shared across the whole sweep, so every perplexity is paired.
inline SweepReport run_sweep(const toylm::ToyLm& model, const toylm::TokenCorpus& corpus,
                             const ExperimentConfig& config, const fisher::FisherWeights* fw,
                             int jobs = 1,
                             std::uint64_t eval_mask_seed = toylm::kDefaultEvalMaskSeed) {
  SweepReport report;
  report.config_echo = config.to_json();
  report.config_hash = config.config_hash();
  report.eval_mask_seed = eval_mask_seed;

  const double ppl_baseline = toylm::perplexity(model, corpus.test, eval_mask_seed);

  struct Point {
    double cr;
    std::uint64_t seed;
  };
  std::vector<Point> grid;
  for (double cr : config.target_cr)
    for (std::uint64_t seed : config.seeds) grid.push_back({cr, seed});

  report.rows.resize(grid.size());
  std::exception_ptr first_error;
  std::mutex error_mutex;

  auto run_point = [&](std::size_t i) {
    try {
      const auto job = run_compression(model, config, fw, grid[i].cr, grid[i].seed);
      const auto substituted = apply_artifact(model, job.artifact);
      SweepRow row;
      row.target_cr = grid[i].cr;
      row.seed = grid[i].seed;
      row.achieved_cr = job.artifact.overall_compression_ratio();
      row.ppl_baseline = ppl_baseline;
      row.ppl_compressed = toylm::perplexity(substituted, corpus.test, eval_mask_seed);
      row.recon_rmse_mean = job.recon_rmse_mean;
      report.rows[i] = row;
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mutex);
      if (!first_error) first_error = std::current_exception();
    }
  };

  if (jobs <= 1) {
    for (std::size_t i = 0; i < grid.size(); ++i) run_point(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(jobs), grid.size());
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < grid.size(); i = next.fetch_add(1))
          run_point(i);
      });
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  for (double cr : config.target_cr) {
    std::vector<double> ppl, ach, rms;
    for (const auto& row : report.rows)
      if (row.target_cr == cr) {
        ppl.push_back(row.ppl_compressed);
        ach.push_back(row.achieved_cr);
        rms.push_back(row.recon_rmse_mean);
      }
    report.medians.push_back({cr, median(ach), median(ppl), median(rms)});
  }
  return report;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

namespace detail {

/// Shortest round-trip decimal form; locale-free and deterministic.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

inline std::string to_csv(const SweepReport& report) {
  std::ostringstream out;
  out << "kind,target_cr,seed,achieved_cr,ppl_baseline,ppl_compressed,recon_rmse_mean,"
         "config_hash\n";
  for (const auto& r : report.rows)
    out << "seed," << detail::format_double(r.target_cr) << ',' << r.seed << ','
        << detail::format_double(r.achieved_cr) << ',' << detail::format_double(r.ppl_baseline)
        << ',' << detail::format_double(r.ppl_compressed) << ','
        << detail::format_double(r.recon_rmse_mean) << ',' << report.config_hash << '\n';
  for (const auto& m : report.medians)
    out << "median," << detail::format_double(m.target_cr) << ",,"
        << detail::format_double(m.achieved_cr_median) << ",,"
        << detail::format_double(m.ppl_compressed_median) << ','
        << detail::format_double(m.recon_rmse_median) << ',' << report.config_hash << '\n';
  return out.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw IoError(IoError::Code::open_failed, "cannot open " + path.string());
  f << content;
  if (!f) throw IoError(IoError::Code::write_failed, "short write to " + path.string());
}

}  // namespace matcrush::experiment

#endif  // MATCRUSH_EXPERIMENT_HPP_
