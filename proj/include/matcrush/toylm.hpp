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
// A self-contained desk-scale masked language model. It supplies realistic
// weight matrices for compression experiments, a gradient oracle for Fisher
// estimation, and paired-mask perplexity as the quality signal.

#ifndef MATCRUSH_TOYLM_HPP_
#define MATCRUSH_TOYLM_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "matcrush/autodiff.hpp"
#include "matcrush/common.hpp"
#include "matcrush/rng.hpp"
#include "matcrush/tensor_io.hpp"

namespace matcrush::toylm {

using json = nlohmann::json;

struct ToyLmConfig {
  Index vocab = 256;  // the top id (vocab - 1) is reserved as [MASK]
  Index model_dim = 64;
  Index layers = 4;
  Index heads = 4;
  Index ff_dim = 128;
  Index max_seq = 64;
  double mask_prob = 0.15;
  std::uint64_t seed = 0;

  Index mask_id() const { return vocab - 1; }
  Index real_vocab() const { return vocab - 1; }

  void validate() const {
    if (vocab < 4 || model_dim < 2 || layers < 1 || heads < 1 || ff_dim < 1 || max_seq < 2)
      throw ShapeError("ToyLmConfig: degenerate dimensions");
    if (model_dim % heads != 0)
      throw ShapeError("ToyLmConfig: model_dim must be divisible by heads");
    if (mask_prob <= 0.0 || mask_prob >= 1.0)
      throw ShapeError("ToyLmConfig: mask_prob must be in (0,1)");
  }

  json to_json() const {
    return {{"vocab", vocab},       {"model_dim", model_dim}, {"layers", layers},
            {"heads", heads},       {"ff_dim", ff_dim},       {"max_seq", max_seq},
            {"mask_prob", mask_prob}, {"seed", seed}};
  }

  static ToyLmConfig from_json(const json& j) {
    ToyLmConfig c;
    c.vocab = j.at("vocab").get<Index>();
    c.model_dim = j.at("model_dim").get<Index>();
    c.layers = j.at("layers").get<Index>();
    c.heads = j.at("heads").get<Index>();
    c.ff_dim = j.at("ff_dim").get<Index>();
    c.max_seq = j.at("max_seq").get<Index>();
    c.mask_prob = j.at("mask_prob").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Synthetic corpus: order-2 Markov chain over a Zipf vocabulary
// ---------------------------------------------------------------------------

struct TokenCorpus {
  std::vector<std::uint16_t> train;
  std::vector<std::uint16_t> test;
  std::uint64_t seed = 0;
  double unigram_entropy_nats = 0.0;
};

namespace detail {

// Each (prev2, prev1) context boosts a support set on top of the global Zipf
// mass. Tokens carry a seeded 16-way class; the support is the union of two
// target classes obtained by applying seeded permutations to the neighbour
// classes. Permutations keep the class walk well mixed and leave the
// stationary unigram Zipf, while the context -> support map stays rank-16 and
// learnable by a 64-dim model instead of requiring rote memorization.
inline constexpr double kSupportBoost = 100.0;
inline constexpr std::uint32_t kTokenClasses = 16;

class MarkovSource {
 public:
  MarkovSource(std::uint64_t seed, Index real_vocab)
      : seed_(seed), n_(real_vocab), rng_(derive_seed(seed, 0xc0)) {
    // Exponent 1.3: the in-support renormalization flattens top-token
    // dominance, so a steeper raw law keeps the stationary unigram ratio in
    // the usual Zipf range.
    zipf_.resize(static_cast<std::size_t>(n_));
    cum_.resize(static_cast<std::size_t>(n_));
    double acc = 0.0;
    for (Index t = 0; t < n_; ++t) {
      zipf_[static_cast<std::size_t>(t)] = std::pow(static_cast<double>(t + 1), -1.3);
      acc += zipf_[static_cast<std::size_t>(t)];
      cum_[static_cast<std::size_t>(t)] = acc;
    }
    zipf_total_ = acc;
    // Greedy equal-Zipf-mass partition (heaviest tokens first, in a seeded
    // tie-break order): every class carries the same probability mass, so the
    // class walk stays uniform and the stationary unigram stays Zipf.
    token_class_.resize(static_cast<std::size_t>(n_));
    {
      Rng class_rng(derive_seed(seed, 0xc1a5));
      std::vector<Index> order(static_cast<std::size_t>(n_));
      for (Index t = 0; t < n_; ++t) order[static_cast<std::size_t>(t)] = t;
      std::vector<double> mass(kTokenClasses, 0.0);
      std::vector<double> jitter(kTokenClasses);
      for (auto& j : jitter) j = class_rng.uniform01() * 1e-9;
      for (Index t : order) {
        std::uint32_t lightest = 0;
        for (std::uint32_t c = 1; c < kTokenClasses; ++c)
          if (mass[c] + jitter[c] < mass[lightest] + jitter[lightest]) lightest = c;
        token_class_[static_cast<std::size_t>(t)] = lightest;
        mass[lightest] += zipf_[static_cast<std::size_t>(t)];
      }
    }
    Rng perm_rng(derive_seed(seed, 0x9e));
    for (auto* perm : {&perm1_, &perm2_}) {
      perm->resize(kTokenClasses);
      for (std::uint32_t i = 0; i < kTokenClasses; ++i) (*perm)[i] = i;
      perm_rng.shuffle(*perm);
    }
    prev2_ = sample_global();
    prev1_ = sample_global();
  }

  std::uint16_t next() {
    const Context& ctx = context(prev2_, prev1_);
    std::uint16_t tok;
    const double z = zipf_total_ + kSupportBoost * ctx.support_mass;
    if (rng_.uniform01() * z < zipf_total_) {
      tok = sample_global();
    } else {
      const double u = rng_.uniform01() * ctx.support_mass;
      double acc = 0.0;
      tok = ctx.support.back();
      for (std::uint16_t c : ctx.support) {
        acc += zipf_[c];
        if (u < acc) {
          tok = c;
          break;
        }
      }
    }
    prev2_ = prev1_;
    prev1_ = tok;
    return tok;
  }

  struct Context {
    std::vector<std::uint16_t> support;
    double support_mass = 0.0;
  };

  // Exposed for corpus statistics and oracle computations in tests.
  const Context& transition_context(std::uint16_t a, std::uint16_t b) { return context(a, b); }
  double zipf_weight(Index t) const { return zipf_[static_cast<std::size_t>(t)]; }
  double zipf_total() const { return zipf_total_; }

 private:
  std::uint16_t sample_global() {
    const double u = rng_.uniform01() * zipf_total_;
    const auto it = std::lower_bound(cum_.begin(), cum_.end(), u);
    return static_cast<std::uint16_t>(std::min<std::ptrdiff_t>(it - cum_.begin(), n_ - 1));
  }

  const Context& context(std::uint16_t a, std::uint16_t b) {
    const std::uint32_t key =
        token_class_[a] * kTokenClasses + token_class_[b];
    auto it = contexts_.find(key);
    if (it != contexts_.end()) return it->second;

    // Depends only on (seed, class pair), never on visit order.
    const std::uint32_t c1 = perm1_[token_class_[b]];
    const std::uint32_t c2 = perm2_[token_class_[a]];
    Context ctx;
    for (Index t = 0; t < n_; ++t) {
      const std::uint32_t c = token_class_[static_cast<std::size_t>(t)];
      if (c == c1 || c == c2) ctx.support.push_back(static_cast<std::uint16_t>(t));
    }
    for (std::uint16_t c : ctx.support) ctx.support_mass += zipf_[c];
    return contexts_.emplace(key, std::move(ctx)).first->second;
  }

  std::uint64_t seed_;
  Index n_;
  Rng rng_;
  std::vector<double> zipf_;
  std::vector<double> cum_;
  std::vector<std::uint32_t> token_class_;
  std::vector<std::uint32_t> perm1_, perm2_;
  double zipf_total_ = 0.0;
  std::uint16_t prev2_ = 0;
  std::uint16_t prev1_ = 0;
  std::unordered_map<std::uint32_t, Context> contexts_;
};

inline double unigram_entropy(const std::vector<std::uint16_t>& tokens, Index vocab) {
  std::vector<double> counts(static_cast<std::size_t>(vocab), 0.0);
  for (std::uint16_t t : tokens) counts[t] += 1.0;
  double h = 0.0;
  const double n = static_cast<double>(tokens.size());
  for (double c : counts) {
    if (c <= 0.0) continue;
    const double p = c / n;
    h -= p * std::log(p);
  }
  return h;
}

}  // namespace detail

/// Deterministic synthetic corpus; test tokens continue the same chain and
/// are disjoint from train.
inline TokenCorpus generate_corpus(std::uint64_t seed, std::size_t train_tokens,
                                   std::size_t test_tokens, Index vocab = 256) {
  const Index real = vocab - 1;
  if (real < 4) throw ShapeError("generate_corpus: vocabulary too small");
  if (train_tokens == 0 || test_tokens == 0)
    throw ShapeError("generate_corpus: token counts must be positive");
  detail::MarkovSource source(seed, real);
  TokenCorpus corpus;
  corpus.seed = seed;
  corpus.train.reserve(train_tokens);
  corpus.test.reserve(test_tokens);
  for (std::size_t i = 0; i < train_tokens; ++i) corpus.train.push_back(source.next());
  for (std::size_t i = 0; i < test_tokens; ++i) corpus.test.push_back(source.next());
  corpus.unigram_entropy_nats = detail::unigram_entropy(corpus.train, vocab);
  return corpus;
}

// Corpus file format: raw little-endian u16 stream (train then test) plus a
// JSON sidecar at <path>.json with seed and counts.
inline void save_corpus(const TokenCorpus& corpus, const std::filesystem::path& path) {
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError(IoError::Code::open_failed, "cannot open " + path.string());
    f.write(reinterpret_cast<const char*>(corpus.train.data()),
            static_cast<std::streamsize>(corpus.train.size() * sizeof(std::uint16_t)));
    f.write(reinterpret_cast<const char*>(corpus.test.data()),
            static_cast<std::streamsize>(corpus.test.size() * sizeof(std::uint16_t)));
    if (!f) throw IoError(IoError::Code::write_failed, "short write to " + path.string());
  }
  json sidecar = {{"version", 1},
                  {"seed", corpus.seed},
                  {"train_tokens", corpus.train.size()},
                  {"test_tokens", corpus.test.size()},
                  {"unigram_entropy_nats", corpus.unigram_entropy_nats}};
  std::ofstream s(path.string() + ".json", std::ios::trunc);
  if (!s) throw IoError(IoError::Code::open_failed, "cannot open " + path.string() + ".json");
  s << sidecar.dump(2) << "\n";
}

inline TokenCorpus load_corpus(const std::filesystem::path& path) {
  std::ifstream s(path.string() + ".json");
  if (!s) throw IoError(IoError::Code::open_failed, "cannot open " + path.string() + ".json");
  json sidecar;
  try {
    s >> sidecar;
  } catch (const json::exception& e) {
    throw IoError(IoError::Code::bad_header, "unparseable corpus sidecar: " + std::string(e.what()));
  }
  TokenCorpus corpus;
  corpus.seed = sidecar.at("seed").get<std::uint64_t>();
  corpus.unigram_entropy_nats = sidecar.value("unigram_entropy_nats", 0.0);
  const auto n_train = sidecar.at("train_tokens").get<std::size_t>();
  const auto n_test = sidecar.at("test_tokens").get<std::size_t>();

  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(IoError::Code::open_failed, "cannot open " + path.string());
  corpus.train.resize(n_train);
  corpus.test.resize(n_test);
  f.read(reinterpret_cast<char*>(corpus.train.data()),
         static_cast<std::streamsize>(n_train * sizeof(std::uint16_t)));
  f.read(reinterpret_cast<char*>(corpus.test.data()),
         static_cast<std::streamsize>(n_test * sizeof(std::uint16_t)));
  if (!f) throw IoError(IoError::Code::truncated, "truncated corpus file " + path.string());
  return corpus;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct ToyLm {
  ToyLmConfig cfg;
  ad::ParamStore params;

  const Matrix& matrix(const std::string& name) const {
    return params.entries[static_cast<std::size_t>(params.id_of(name))].value;
  }

  std::vector<std::string> target_names() const {
    std::vector<std::string> names = {"tok_emb"};
    for (Index i = 0; i < cfg.layers; ++i) {
      const std::string p = "layer." + std::to_string(i) + ".";
      names.push_back(p + "key");
      names.push_back(p + "query");
      names.push_back(p + "value");
      names.push_back(p + "out_dense");
    }
    return names;
  }
};

inline ToyLm init_toylm(const ToyLmConfig& cfg) {
  cfg.validate();
  ToyLm lm;
  lm.cfg = cfg;
  Rng rng(derive_seed(cfg.seed, 0x1a));
  const Index d = cfg.model_dim;

  auto glorot = [&](Index out, Index in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    return rng.uniform_matrix(out, in, -bound, bound);
  };

  lm.params.add("tok_emb", 0.1 * rng.gaussian_matrix(cfg.vocab, d));
  // Sinusoidal start for positions: relative-offset attention patterns are
  // expressible from step one instead of being memorized per position.
  {
    Matrix pos(cfg.max_seq, d);
    for (Index p = 0; p < cfg.max_seq; ++p)
      for (Index i = 0; i < d; ++i) {
        const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i / 2) / static_cast<double>(d));
        pos(p, i) = 0.1 * (i % 2 == 0 ? std::sin(freq * static_cast<double>(p))
                                      : std::cos(freq * static_cast<double>(p)));
      }
    lm.params.add("pos_emb", pos);
  }
  for (Index i = 0; i < cfg.layers; ++i) {
    const std::string p = "layer." + std::to_string(i) + ".";
    lm.params.add(p + "query", glorot(d, d));
    lm.params.add(p + "key", glorot(d, d));
    lm.params.add(p + "value", glorot(d, d));
    lm.params.add(p + "out_dense", glorot(d, d));
    lm.params.add(p + "ln1.gamma", Matrix::Ones(1, d));
    lm.params.add(p + "ln1.beta", Matrix::Zero(1, d));
    lm.params.add(p + "ln2.gamma", Matrix::Ones(1, d));
    lm.params.add(p + "ln2.beta", Matrix::Zero(1, d));
    lm.params.add(p + "ffn.w1", glorot(cfg.ff_dim, d));
    lm.params.add(p + "ffn.b1", Matrix::Zero(1, cfg.ff_dim));
    lm.params.add(p + "ffn.w2", glorot(d, cfg.ff_dim));
    lm.params.add(p + "ffn.b2", Matrix::Zero(1, d));
  }
  lm.params.add("final_ln.gamma", Matrix::Ones(1, d));
  lm.params.add("final_ln.beta", Matrix::Zero(1, d));
  // Zero head: the untrained model predicts exactly uniformly.
  lm.params.add("head.w", Matrix::Zero(cfg.vocab, d));
  lm.params.add("head.b", Matrix::Zero(1, cfg.vocab));
  return lm;
}

/// Returns a copy of the model with one named matrix replaced; the original
/// is untouched. Substitution must preserve shape.
inline ToyLm substitute(const ToyLm& model, const std::string& name, const Matrix& matrix) {
  const Matrix& old = model.matrix(name);  // throws on unknown name
  if (old.rows() != matrix.rows() || old.cols() != matrix.cols())
    throw ShapeError("substitute: shape mismatch for " + name);
  if (!all_finite(matrix)) throw ShapeError("substitute: non-finite replacement for " + name);
  ToyLm out = model;
  out.params.entries[static_cast<std::size_t>(out.params.id_of(name))].value = matrix;
  return out;
}

// ---------------------------------------------------------------------------
// Batches and masking
// ---------------------------------------------------------------------------

struct LmBatch {
  Index batch = 0;
  Index seq = 0;
  std::vector<Index> input_ids;   // corrupted tokens, batch*seq
  std::vector<Index> target_ids;  // original tokens
  std::vector<char> mask;         // 1 = predict this position
};

namespace detail {

/// BERT-style corruption of one window: each position is selected with
/// mask_prob, then 80% [MASK] / 10% random token / 10% kept. At least one
/// position per window is always selected.
inline void corrupt_window(const std::uint16_t* tokens, Index seq, const ToyLmConfig& cfg,
                           std::uint64_t window_key, std::uint64_t mask_seed, LmBatch* out) {
  Rng rng(derive_seed(mask_seed, window_key));
  const std::size_t base = out->input_ids.size();
  bool any = false;
  for (Index s = 0; s < seq; ++s) {
    const Index orig = tokens[s];
    Index input = orig;
    char m = 0;
    if (rng.uniform01() < cfg.mask_prob) {
      m = 1;
      any = true;
      const double v = rng.uniform01();
      if (v < 0.8)
        input = cfg.mask_id();
      else if (v < 0.9)
        input = static_cast<Index>(rng.uniform_below(static_cast<std::uint64_t>(cfg.real_vocab())));
    }
    out->input_ids.push_back(input);
    out->target_ids.push_back(orig);
    out->mask.push_back(m);
  }
  if (!any) {
    const std::size_t mid = base + static_cast<std::size_t>(seq / 2);
    out->mask[mid] = 1;
    out->input_ids[mid] = cfg.mask_id();
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward pass (tape-based; the same graph serves training and evaluation)
// ---------------------------------------------------------------------------

namespace detail {

inline ad::Tape::Var lm_logits(ad::Tape& tape, ad::ParamStore& store, const ToyLmConfig& cfg,
                               const LmBatch& batch) {
  using Var = ad::Tape::Var;
  const Index s = batch.seq;
  const Index b = batch.batch;
  const Index d = cfg.model_dim;
  const Index dh = d / cfg.heads;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<Index> pos_ids(static_cast<std::size_t>(b * s));
  for (Index bi = 0; bi < b; ++bi)
    for (Index si = 0; si < s; ++si) pos_ids[static_cast<std::size_t>(bi * s + si)] = si;

  Var h = tape.add(tape.gather_rows(store.id_of("tok_emb"), batch.input_ids),
                   tape.gather_rows(store.id_of("pos_emb"), pos_ids));

  for (Index li = 0; li < cfg.layers; ++li) {
    const std::string p = "layer." + std::to_string(li) + ".";
    Var x = tape.layer_norm(h, tape.param(store.id_of(p + "ln1.gamma")),
                            tape.param(store.id_of(p + "ln1.beta")));
    Var q = tape.matmul(x, tape.param(store.id_of(p + "query")));
    Var k = tape.matmul(x, tape.param(store.id_of(p + "key")));
    Var v = tape.matmul(x, tape.param(store.id_of(p + "value")));

    std::vector<Var> seq_ctx;
    seq_ctx.reserve(static_cast<std::size_t>(b));
    for (Index bi = 0; bi < b; ++bi) {
      std::vector<Var> head_ctx;
      head_ctx.reserve(static_cast<std::size_t>(cfg.heads));
      for (Index hi = 0; hi < cfg.heads; ++hi) {
        Var qh = tape.block(q, bi * s, hi * dh, s, dh);
        Var kh = tape.block(k, bi * s, hi * dh, s, dh);
        Var vh = tape.block(v, bi * s, hi * dh, s, dh);
        Var attn = tape.softmax_rows(tape.scale(tape.matmul(qh, kh, false, true), attn_scale));
        head_ctx.push_back(tape.matmul(attn, vh));
      }
      seq_ctx.push_back(tape.hstack(std::move(head_ctx)));
    }
    Var ctx = tape.vstack(std::move(seq_ctx));
    h = tape.add(h, tape.matmul(ctx, tape.param(store.id_of(p + "out_dense"))));

    Var x2 = tape.layer_norm(h, tape.param(store.id_of(p + "ln2.gamma")),
                             tape.param(store.id_of(p + "ln2.beta")));
    Var f = tape.activation(
        tape.add_rowvec(tape.matmul(x2, tape.param(store.id_of(p + "ffn.w1")), false, true),
                        tape.param(store.id_of(p + "ffn.b1"))),
        ad::Activation::leaky_relu);
    Var ff = tape.add_rowvec(tape.matmul(f, tape.param(store.id_of(p + "ffn.w2")), false, true),
                             tape.param(store.id_of(p + "ffn.b2")));
    h = tape.add(h, ff);
  }

  h = tape.layer_norm(h, tape.param(store.id_of("final_ln.gamma")),
                      tape.param(store.id_of("final_ln.beta")));
  return tape.add_rowvec(tape.matmul(h, tape.param(store.id_of("head.w")), false, true),
                         tape.param(store.id_of("head.b")));
}

/// Order-stable pairwise sum: the reduction tree depends only on length.
inline double pairwise_sum(const double* data, std::size_t n) {
  if (n <= 8) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += data[i];
    return s;
  }
  const std::size_t half = n / 2;
  return pairwise_sum(data, half) + pairwise_sum(data + half, n - half);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct LmTrainOptions {
  Index batch_sequences = 8;
  double learning_rate = 2e-3;
  std::int64_t warmup_steps = 200;  // linear ramp; clipped to steps/10
  ad::AdamConfig adam;
};

/// Masked-LM training with Adam and linear warmup; deterministic given
/// (corpus, cfg, steps).
inline ToyLm train_toylm(const TokenCorpus& corpus, const ToyLmConfig& cfg, std::int64_t steps,
                         const LmTrainOptions& opts = {}) {
  cfg.validate();
  if (corpus.train.size() < static_cast<std::size_t>(cfg.max_seq))
    throw ShapeError("train_toylm: corpus shorter than one window");
  ToyLm lm = init_toylm(cfg);
  ad::Adam adam(opts.learning_rate, opts.adam);
  Rng sample_rng(derive_seed(cfg.seed, 0x7e));
  const std::uint64_t mask_seed = derive_seed(cfg.seed, 0x7f);
  const std::size_t max_start = corpus.train.size() - static_cast<std::size_t>(cfg.max_seq);
  const std::int64_t warmup = std::min(opts.warmup_steps, std::max<std::int64_t>(1, steps / 10));

  for (std::int64_t step = 1; step <= steps; ++step) {
    if (step <= warmup)
      adam.set_learning_rate(opts.learning_rate * static_cast<double>(step) /
                             static_cast<double>(warmup));
    LmBatch batch;
    batch.batch = opts.batch_sequences;
    batch.seq = cfg.max_seq;
    for (Index bi = 0; bi < batch.batch; ++bi) {
      const std::size_t start = static_cast<std::size_t>(sample_rng.uniform_below(max_start + 1));
      detail::corrupt_window(corpus.train.data() + start, cfg.max_seq, cfg,
                             static_cast<std::uint64_t>(step) * 1024 + static_cast<std::uint64_t>(bi),
                             mask_seed, &batch);
    }

    lm.params.zero_grads();
    ad::Tape tape(&lm.params);
    ad::Tape::Var logits = detail::lm_logits(tape, lm.params, cfg, batch);
    ad::Tape::Var loss = tape.masked_cross_entropy(logits, batch.target_ids, batch.mask);
    const double loss_value = tape.val(loss)(0, 0);
    if (!std::isfinite(loss_value))
      throw DivergenceError(step, "toy LM training diverged at step " + std::to_string(step));
    tape.backward(loss);
    adam.step(lm.params);

    if (step % 200 == 0 || step == 1)
      MATCRUSH_LOG_DEBUG("toylm step %lld loss %.4f", static_cast<long long>(step), loss_value);
  }
  return lm;
}

// ---------------------------------------------------------------------------
// Perplexity
// ---------------------------------------------------------------------------

inline constexpr std::uint64_t kDefaultEvalMaskSeed = 0x70a1;

namespace detail {

struct EvalBatches {
  std::vector<LmBatch> batches;
  std::size_t masked_positions = 0;
};

/// Non-overlapping test windows with masks fixed by (mask_seed, window index)
/// only, so every model in an experiment sees identical mask realizations.
inline EvalBatches eval_batches(const std::vector<std::uint16_t>& test, const ToyLmConfig& cfg,
                                std::uint64_t mask_seed, Index batch_windows = 16) {
  const Index s = cfg.max_seq;
  const std::size_t n_windows = test.size() / static_cast<std::size_t>(s);
  if (n_windows == 0) throw ShapeError("perplexity: test set shorter than one window");
  EvalBatches out;
  LmBatch cur;
  cur.batch = 0;
  cur.seq = s;
  for (std::size_t w = 0; w < n_windows; ++w) {
    corrupt_window(test.data() + w * static_cast<std::size_t>(s), s, cfg,
                   static_cast<std::uint64_t>(w), mask_seed, &cur);
    ++cur.batch;
    if (cur.batch == batch_windows) {
      out.batches.push_back(std::move(cur));
      cur = LmBatch{};
      cur.batch = 0;
      cur.seq = s;
    }
  }
  if (cur.batch > 0) out.batches.push_back(std::move(cur));
  for (const auto& b : out.batches)
    for (char m : b.mask) out.masked_positions += (m != 0);
  return out;
}

/// Cross-entropy (nats) at each masked row of a logits matrix.
inline void append_masked_ce(const Matrix& logits, const LmBatch& batch,
                             std::vector<double>* out) {
  for (Index r = 0; r < logits.rows(); ++r) {
    if (!batch.mask[static_cast<std::size_t>(r)]) continue;
    const double mx = logits.row(r).maxCoeff();
    const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    out->push_back(lse - logits(r, batch.target_ids[static_cast<std::size_t>(r)]));
  }
}

/// Cross-entropy (nats) at every masked position, in window order.
inline std::vector<double> masked_ce_values(ToyLm& model, const EvalBatches& eb) {
  std::vector<double> ces;
  ces.reserve(eb.masked_positions);
  for (const LmBatch& batch : eb.batches) {
    ad::Tape tape(&model.params);
    ad::Tape::Var logits = detail::lm_logits(tape, model.params, model.cfg, batch);
    append_masked_ce(tape.val(logits), batch, &ces);
  }
  return ces;
}

}  // namespace detail

/// exp(mean masked cross-entropy) over the seeded, fixed eval masks. Paired
/// across models: identical mask realizations for a given (corpus, seed).
inline double perplexity(const ToyLm& model, const std::vector<std::uint16_t>& test,
                         std::uint64_t mask_seed = kDefaultEvalMaskSeed) {
  const auto eb = detail::eval_batches(test, model.cfg, mask_seed);
  ToyLm& mutable_model = const_cast<ToyLm&>(model);  // tape needs non-const store; values untouched
  const std::vector<double> ces = detail::masked_ce_values(mutable_model, eb);
  const double mean = detail::pairwise_sum(ces.data(), ces.size()) / static_cast<double>(ces.size());
  return std::exp(mean);
}

/// Add-1-smoothed train-unigram perplexity on the same masked positions.
inline double unigram_baseline_perplexity(const TokenCorpus& corpus, const ToyLmConfig& cfg,
                                          std::uint64_t mask_seed = kDefaultEvalMaskSeed) {
  std::vector<double> counts(static_cast<std::size_t>(cfg.vocab), 1.0);
  for (std::uint16_t t : corpus.train) counts[t] += 1.0;
  const double total = detail::pairwise_sum(counts.data(), counts.size());
  const auto eb = detail::eval_batches(corpus.test, cfg, mask_seed);
  std::vector<double> ces;
  ces.reserve(eb.masked_positions);
  for (const auto& batch : eb.batches)
    for (std::size_t i = 0; i < batch.mask.size(); ++i)
      if (batch.mask[i])
        ces.push_back(-std::log(counts[static_cast<std::size_t>(batch.target_ids[i])] / total));
  const double mean = detail::pairwise_sum(ces.data(), ces.size()) / static_cast<double>(ces.size());
  return std::exp(mean);
}

// ---------------------------------------------------------------------------
// Fisher gradient oracle
// ---------------------------------------------------------------------------

/// Yields per-batch gradients of the masked-LM cross-entropy w.r.t. the
/// target matrices. Owns the model's mutable gradient state, so it must be
/// consumed sequentially.
class FisherOracle {
 public:
  FisherOracle(ToyLm& model, const TokenCorpus& corpus, std::set<std::string> targets,
               std::size_t n_batches, Index batch_sequences, std::uint64_t seed)
      : model_(model), targets_(std::move(targets)) {
    for (const auto& t : targets_) model_.params.id_of(t);  // addressability check
    if (corpus.train.size() < static_cast<std::size_t>(model_.cfg.max_seq))
      throw ShapeError("fisher_oracle: corpus shorter than one window");
    Rng rng(derive_seed(seed, 0xf1));
    const std::uint64_t mask_seed = derive_seed(seed, 0xf2);
    const std::size_t max_start = corpus.train.size() - static_cast<std::size_t>(model_.cfg.max_seq);
    batches_.reserve(n_batches);
    for (std::size_t i = 0; i < n_batches; ++i) {
      LmBatch b;
      b.batch = batch_sequences;
      b.seq = model_.cfg.max_seq;
      for (Index bi = 0; bi < batch_sequences; ++bi) {
        const std::size_t start = static_cast<std::size_t>(rng.uniform_below(max_start + 1));
        detail::corrupt_window(corpus.train.data() + start, model_.cfg.max_seq, model_.cfg,
                               i * 1024 + static_cast<std::uint64_t>(bi), mask_seed, &b);
      }
      batches_.push_back(std::move(b));
    }
  }

  const std::vector<LmBatch>& batches() const { return batches_; }

  /// Gradients for exactly the targets; untargeted parameters are neither
  /// accumulated nor returned.
  std::map<std::string, Matrix> operator()(const LmBatch& batch) {
    for (auto& e : model_.params.entries) e.track = targets_.count(e.name) != 0;
    model_.params.zero_grads();
    ad::Tape tape(&model_.params);
    ad::Tape::Var logits = detail::lm_logits(tape, model_.params, model_.cfg, batch);
    ad::Tape::Var loss = tape.masked_cross_entropy(logits, batch.target_ids, batch.mask);
    tape.backward(loss);
    std::map<std::string, Matrix> grads;
    for (const std::string& t : targets_)
      grads.emplace(t, model_.params.entries[static_cast<std::size_t>(model_.params.id_of(t))].grad);
    for (auto& e : model_.params.entries) e.track = true;
    return grads;
  }

 private:
  ToyLm& model_;
  std::set<std::string> targets_;
  std::vector<LmBatch> batches_;
};

inline FisherOracle fisher_oracle(ToyLm& model, const TokenCorpus& corpus,
                                  const std::set<std::string>& targets, std::size_t n_batches,
                                  Index batch_sequences = 8, std::uint64_t seed = 0) {
  return FisherOracle(model, corpus, targets, n_batches, batch_sequences, seed);
}

// ---------------------------------------------------------------------------
// Bundle serialization
// ---------------------------------------------------------------------------

inline io::TensorBundle to_bundle(const ToyLm& model) {
  io::TensorBundle bundle;
  bundle.manifest.seed = model.cfg.seed;
  bundle.manifest.producer = "matcrush toylm";
  bundle.manifest.extra["toylm_config"] = model.cfg.to_json();
  for (const auto& e : model.params.entries) bundle.add(e.name, e.value);
  return bundle;
}

inline ToyLm from_bundle(const io::TensorBundle& bundle) {
  if (!bundle.manifest.extra.contains("toylm_config"))
    throw IoError(IoError::Code::bad_header, "bundle has no toylm_config manifest entry");
  const ToyLmConfig cfg = ToyLmConfig::from_json(bundle.manifest.extra.at("toylm_config"));
  ToyLm lm = init_toylm(cfg);
  for (auto& e : lm.params.entries) {
    const Matrix& m = bundle.at(e.name);
    if (m.rows() != e.value.rows() || m.cols() != e.value.cols())
      throw ShapeError("toylm bundle: shape mismatch for " + e.name);
    e.value = m;
  }
  return lm;
}

}  // namespace matcrush::toylm

#endif  // MATCRUSH_TOYLM_HPP_
