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
// Command-line front end: corpus generation, toy-LM training, Fisher
// estimation, compression, evaluation, seeded sweeps and report emission.
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#ifndef MATCRUSH_CLI_HPP_
#define MATCRUSH_CLI_HPP_

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "matcrush/artifact.hpp"
#include "matcrush/experiment.hpp"
#include "matcrush/fisher.hpp"
#include "matcrush/toylm.hpp"

namespace matcrush::cli {

using json = nlohmann::json;

namespace detail {

using json = nlohmann::json;

inline std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t comma = s.find(',', start);
    const std::string item = s.substr(start, comma == std::string::npos ? comma : comma - start);
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

inline toylm::TokenCorpus corpus_for(const std::optional<std::string>& path,
                                     std::uint64_t seed) {
  if (path) return toylm::load_corpus(*path);
  MATCRUSH_LOG_INFO("no --corpus given; generating the default corpus (seed %llu)",
                    static_cast<unsigned long long>(seed));
  return toylm::generate_corpus(seed, 200000, 16000);
}

inline fisher::FisherWeights require_fisher(const std::optional<std::string>& path) {
  if (!path) throw ConfigError("this configuration needs --fisher <bundle>");
  return fisher::from_bundle(io::load_bundle(*path));
}

struct EvalOutput {
  double ppl_baseline = 0.0;
  double ppl_compressed = 0.0;
  double achieved_cr = 0.0;
  std::uint64_t mask_seed = 0;

  json to_json() const {
    return {{"ppl_baseline", ppl_baseline},
            {"ppl_compressed", ppl_compressed},
            {"achieved_cr", achieved_cr},
            {"mask_seed", mask_seed}};
  }

  std::string to_csv() const {
    std::ostringstream out;
    out << "ppl_baseline,ppl_compressed,achieved_cr,mask_seed\n"
        << experiment::detail::format_double(ppl_baseline) << ','
        << experiment::detail::format_double(ppl_compressed) << ','
        << experiment::detail::format_double(achieved_cr) << ',' << mask_seed << '\n';
    return out.str();
  }
};

inline void emit(const std::string& text, const std::optional<std::string>& out_path) {
  if (out_path)
    experiment::write_text_file(*out_path, text);
  else
    std::cout << text;
}

}  // namespace detail

inline int run(int argc, const char* const* argv) {
  CLI::App app{"matcrush: offline weight-matrix compression workbench"};
  app.require_subcommand(1);

  // corpus gen
  auto* corpus_cmd = app.add_subcommand("corpus", "corpus utilities")->require_subcommand(1);
  auto* corpus_gen = corpus_cmd->add_subcommand("gen", "generate a synthetic token corpus");
  std::uint64_t cg_seed = 0;
  std::size_t cg_train = 200000, cg_test = 16000;
  Index cg_vocab = 256;
  std::string cg_out;
  corpus_gen->add_option("--seed", cg_seed, "generator seed");
  corpus_gen->add_option("--train", cg_train, "train token count");
  corpus_gen->add_option("--test", cg_test, "test token count");
  corpus_gen->add_option("--vocab", cg_vocab, "vocabulary size incl. mask id");
  corpus_gen->add_option("--out", cg_out, "output token file")->required();

  // toylm train
  auto* toylm_cmd = app.add_subcommand("toylm", "toy masked LM")->require_subcommand(1);
  auto* toylm_train = toylm_cmd->add_subcommand("train", "train the toy masked LM");
  std::uint64_t tt_seed = 0;
  std::int64_t tt_steps = 3000;
  Index tt_batch = 8;
  double tt_lr = 2e-3;
  std::optional<std::string> tt_corpus;
  std::string tt_out;
  toylm_train->add_option("--seed", tt_seed, "model seed");
  toylm_train->add_option("--steps", tt_steps, "training steps");
  toylm_train->add_option("--batch", tt_batch, "sequences per step");
  toylm_train->add_option("--lr", tt_lr, "learning rate");
  toylm_train->add_option("--corpus", tt_corpus, "token file (generated if absent)");
  toylm_train->add_option("--out", tt_out, "output model bundle")->required();

  // fisher estimate
  auto* fisher_cmd = app.add_subcommand("fisher", "Fisher information")->require_subcommand(1);
  auto* fisher_est = fisher_cmd->add_subcommand("estimate", "estimate Fisher weights");
  std::string fe_model, fe_corpus, fe_out;
  std::string fe_targets = "tok_emb,layer.*.key,layer.*.query,layer.*.value,layer.*.out_dense";
  std::size_t fe_batches = 64;
  Index fe_batch_seqs = 8;
  std::uint64_t fe_seed = 0;
  fisher_est->add_option("--model", fe_model, "model bundle")->required();
  fisher_est->add_option("--corpus", fe_corpus, "token file")->required();
  fisher_est->add_option("--targets", fe_targets, "comma-separated name patterns");
  fisher_est->add_option("--batches", fe_batches, "dataset units to consume");
  fisher_est->add_option("--batch-seqs", fe_batch_seqs, "sequences per batch");
  fisher_est->add_option("--seed", fe_seed, "batch/mask seed");
  fisher_est->add_option("--out", fe_out, "output fisher bundle")->required();

  // compress
  auto* compress_cmd = app.add_subcommand("compress", "compress target matrices");
  std::string cp_config, cp_model, cp_out;
  std::optional<std::string> cp_fisher;
  std::optional<double> cp_cr;
  std::optional<std::uint64_t> cp_seed;
  compress_cmd->add_option("--config", cp_config, "experiment config JSON")->required();
  compress_cmd->add_option("--model", cp_model, "model bundle")->required();
  compress_cmd->add_option("--fisher", cp_fisher, "fisher bundle");
  compress_cmd->add_option("--cr", cp_cr, "override target compression ratio");
  compress_cmd->add_option("--seed", cp_seed, "override training seed");
  compress_cmd->add_option("--out", cp_out, "output artifact bundle")->required();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "paired-mask perplexity evaluation");
  std::string ev_model, ev_compressed, ev_corpus;
  std::optional<std::string> ev_out;
  std::string ev_format = "json";
  std::uint64_t ev_mask_seed = toylm::kDefaultEvalMaskSeed;
  eval_cmd->add_option("--model", ev_model, "model bundle")->required();
  eval_cmd->add_option("--compressed", ev_compressed, "compressed artifact bundle")->required();
  eval_cmd->add_option("--corpus", ev_corpus, "token file")->required();
  eval_cmd->add_option("--mask-seed", ev_mask_seed, "evaluation mask seed");
  eval_cmd->add_option("--format", ev_format, "csv|json")->check(CLI::IsMember({"csv", "json"}));
  eval_cmd->add_option("--out", ev_out, "output path (stdout if absent)");

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "grid of (target_cr x seeds) with medians");
  std::string sw_config, sw_model, sw_corpus, sw_out;
  std::optional<std::string> sw_fisher;
  int sw_jobs = 1;
  std::string sw_format = "json";
  std::uint64_t sw_mask_seed = toylm::kDefaultEvalMaskSeed;
  sweep_cmd->add_option("--config", sw_config, "experiment config JSON")->required();
  sweep_cmd->add_option("--model", sw_model, "model bundle")->required();
  sweep_cmd->add_option("--corpus", sw_corpus, "token file")->required();
  sweep_cmd->add_option("--fisher", sw_fisher, "fisher bundle");
  sweep_cmd->add_option("--jobs", sw_jobs, "worker pool size");
  sweep_cmd->add_option("--mask-seed", sw_mask_seed, "evaluation mask seed");
  sweep_cmd->add_option("--format", sw_format, "csv|json")->check(CLI::IsMember({"csv", "json"}));
  sweep_cmd->add_option("--out", sw_out, "output report path")->required();

  // report
  auto* report_cmd = app.add_subcommand("report", "convert or re-emit a sweep report");
  std::string rp_in, rp_format = "csv";
  std::optional<std::string> rp_out;
  report_cmd->add_option("--in", rp_in, "sweep report JSON")->required();
  report_cmd->add_option("--format", rp_format, "csv|json")->check(CLI::IsMember({"csv", "json"}));
  report_cmd->add_option("--out", rp_out, "output path (stdout if absent)");

  try {
    app.parse(argc, argv);

    if (*corpus_gen) {
      const auto corpus = toylm::generate_corpus(cg_seed, cg_train, cg_test, cg_vocab);
      toylm::save_corpus(corpus, cg_out);
      MATCRUSH_LOG_INFO("wrote corpus %s (unigram entropy %.3f nats)", cg_out.c_str(),
                        corpus.unigram_entropy_nats);
      return 0;
    }

    if (*toylm_train) {
      const auto corpus = detail::corpus_for(tt_corpus, tt_seed);
      toylm::ToyLmConfig cfg;
      cfg.seed = tt_seed;
      toylm::LmTrainOptions opts;
      opts.batch_sequences = tt_batch;
      opts.learning_rate = tt_lr;
      const auto model = toylm::train_toylm(corpus, cfg, tt_steps, opts);
      io::save_bundle(toylm::to_bundle(model), tt_out);
      MATCRUSH_LOG_INFO("wrote model %s", tt_out.c_str());
      return 0;
    }

    if (*fisher_est) {
      auto model = toylm::from_bundle(io::load_bundle(fe_model));
      const auto corpus = toylm::load_corpus(fe_corpus);
      std::set<std::string> targets;
      for (const auto& pattern : detail::split_csv(fe_targets))
        for (const auto& e : model.params.entries)
          if (experiment::pattern_matches(pattern, e.name)) targets.insert(e.name);
      if (targets.empty()) throw ConfigError("no targets match " + fe_targets);
      auto oracle = toylm::fisher_oracle(model, corpus, targets, fe_batches, fe_batch_seqs,
                                         fe_seed);
      const auto fw = fisher::estimate_fisher(oracle, oracle.batches(), targets);
      io::save_bundle(fisher::to_bundle(fw, fe_seed), fe_out);
      MATCRUSH_LOG_INFO("wrote fisher bundle %s (%zu targets, |D|=%zu)", fe_out.c_str(),
                        targets.size(), fw.sample_count);
      return 0;
    }

    if (*compress_cmd) {
      const auto config = experiment::load_config(cp_config);
      const auto model = toylm::from_bundle(io::load_bundle(cp_model));
      std::optional<fisher::FisherWeights> fw;
      if (cp_fisher) fw = fisher::from_bundle(io::load_bundle(*cp_fisher));
      const double cr = cp_cr.value_or(config.target_cr.front());
      const std::uint64_t seed = cp_seed.value_or(config.seeds.front());
      if (config.target_cr.size() > 1 && !cp_cr)
        MATCRUSH_LOG_INFO("config lists %zu target ratios; compressing at %.3f",
                          config.target_cr.size(), cr);
      const auto job =
          experiment::run_compression(model, config, fw ? &*fw : nullptr, cr, seed);
      io::save_bundle(compress::to_bundle(job.artifact, seed), cp_out);
      MATCRUSH_LOG_INFO("wrote artifact %s (achieved CR %.4f)", cp_out.c_str(),
                        job.artifact.overall_compression_ratio());
      return 0;
    }

    if (*eval_cmd) {
      const auto model = toylm::from_bundle(io::load_bundle(ev_model));
      const auto artifact = compress::from_bundle(io::load_bundle(ev_compressed));
      const auto corpus = toylm::load_corpus(ev_corpus);
      const auto substituted = experiment::apply_artifact(model, artifact);
      detail::EvalOutput out;
      out.mask_seed = ev_mask_seed;
      out.ppl_baseline = toylm::perplexity(model, corpus.test, ev_mask_seed);
      out.ppl_compressed = toylm::perplexity(substituted, corpus.test, ev_mask_seed);
      out.achieved_cr = artifact.overall_compression_ratio();
      detail::emit(ev_format == "json" ? out.to_json().dump(2) + "\n" : out.to_csv(), ev_out);
      return 0;
    }

    if (*sweep_cmd) {
      const auto config = experiment::load_config(sw_config);
      const auto model = toylm::from_bundle(io::load_bundle(sw_model));
      const auto corpus = toylm::load_corpus(sw_corpus);
      std::optional<fisher::FisherWeights> fw;
      if (sw_fisher) fw = fisher::from_bundle(io::load_bundle(*sw_fisher));
      const auto report = experiment::run_sweep(model, corpus, config, fw ? &*fw : nullptr,
                                                sw_jobs, sw_mask_seed);
      experiment::write_text_file(sw_out, sw_format == "json"
                                              ? report.to_json().dump(2) + "\n"
                                              : experiment::to_csv(report));
      MATCRUSH_LOG_INFO("wrote sweep report %s (%zu rows)", sw_out.c_str(),
                        report.rows.size());
      return 0;
    }

    if (*report_cmd) {
      std::ifstream f(rp_in);
      if (!f) throw ConfigError("cannot open report " + rp_in);
      json j;
      try {
        f >> j;
      } catch (const json::exception& e) {
        throw ConfigError("unparseable report " + rp_in + ": " + e.what());
      }
      const auto report = experiment::SweepReport::from_json(j);
      detail::emit(rp_format == "json" ? report.to_json().dump(2) + "\n"
                                       : experiment::to_csv(report),
                   rp_out);
      return 0;
    }
    return 0;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const ConfigError& e) {
    MATCRUSH_LOG_ERROR("%s", e.what());
    return 1;
  } catch (const InfeasibleError& e) {
    MATCRUSH_LOG_ERROR("%s", e.what());
    return 1;
  } catch (const std::exception& e) {
    MATCRUSH_LOG_ERROR("%s", e.what());
    return 2;
  }
}

}  // namespace matcrush::cli

#endif  // MATCRUSH_CLI_HPP_
