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
// On-disk form of compression results. A single-module artifact uses the
// plain naming latent.<member>, decoder.<layer>.<w|b>, norms.<member>;
// multi-module artifacts prefix entries with m<idx>. The manifest carries a
// module table describing kinds, shapes and member ranges.

#ifndef MATCRUSH_ARTIFACT_HPP_
#define MATCRUSH_ARTIFACT_HPP_

#include <optional>
#include <string>
#include <vector>

#include "matcrush/compress.hpp"
#include "matcrush/tensor_io.hpp"

namespace matcrush::compress {

struct ArtifactModule {
  std::optional<FactorizedModule> factorized;
  std::optional<SparseModule> sparse;
  std::string sparse_member;  // SparseModule itself carries no name

  std::vector<std::string> member_names() const {
    if (sparse) return {sparse_member};
    std::vector<std::string> names;
    for (const auto& r : factorized->member_offsets) names.push_back(r.name);
    return names;
  }

  Matrix materialize_member(const std::string& name) const {
    if (sparse) {
      if (name != sparse_member) throw ShapeError("unknown member: " + name);
      return sparse->materialize();
    }
    return factorized->materialize(name);
  }

  std::size_t parameter_count() const {
    return sparse ? sparse->parameter_count() : factorized->parameter_count();
  }

  std::size_t original_count() const {
    return sparse ? sparse->original_count() : factorized->original_count();
  }
};

struct CompressedArtifact {
  std::vector<ArtifactModule> modules;
  json meta = json::object();  // method/config echoes for reports

  double overall_compression_ratio() const {
    std::size_t original = 0, params = 0;
    for (const auto& m : modules) {
      original += m.original_count();
      params += m.parameter_count();
    }
    return static_cast<double>(original) / static_cast<double>(params);
  }
};

namespace detail {

inline json decoder_layer_meta(const DecoderLayer& l) {
  return {{"out", l.w.rows()},
          {"in", l.w.cols()},
          {"activation", ad::to_string(l.act)},
          {"has_bias", l.b.has_value()}};
}

}  // namespace detail

inline io::TensorBundle to_bundle(const CompressedArtifact& artifact, std::uint64_t seed = 0) {
  io::TensorBundle bundle;
  bundle.manifest.seed = seed;
  bundle.manifest.producer = "matcrush compress";
  json table = json::array();

  for (std::size_t mi = 0; mi < artifact.modules.size(); ++mi) {
    const ArtifactModule& am = artifact.modules[mi];
    const std::string prefix =
        artifact.modules.size() > 1 ? "m" + std::to_string(mi) + "." : "";
    json entry;
    if (am.sparse) {
      const SparseModule& s = *am.sparse;
      if (s.kept.empty()) throw ShapeError("cannot serialize a pruning module that kept nothing");
      Matrix idx(static_cast<Index>(s.kept.size()), 1);
      Matrix val(static_cast<Index>(s.kept.size()), 1);
      for (std::size_t i = 0; i < s.kept.size(); ++i) {
        idx(static_cast<Index>(i), 0) = static_cast<double>(s.kept[i].first);
        val(static_cast<Index>(i), 0) = s.kept[i].second;
      }
      bundle.add(prefix + "prune.idx", idx);
      bundle.add(prefix + "prune.val", val);
      entry = {{"kind", "prune"},
               {"member", am.sparse_member},
               {"rows", s.rows},
               {"cols", s.cols}};
    } else {
      const FactorizedModule& f = *am.factorized;
      entry = {{"kind", to_string(f.kind)},
               {"mode", to_string(f.mode)},
               {"original_rows", f.original_rows},
               {"original_cols", f.original_cols},
               {"has_norms", f.stored_row_norms.has_value()}};
      json members = json::array();
      for (const auto& r : f.member_offsets)
        members.push_back({{"name", r.name}, {"row_begin", r.row_begin}, {"rows", r.rows}});
      entry["members"] = std::move(members);

      if (f.kind == Kind::kronecker) {
        bundle.add(prefix + "kron.b", f.kron_b);
        bundle.add(prefix + "kron.c", f.kron_c);
      } else {
        entry["k"] = f.latent.cols();
        for (const auto& r : f.member_offsets)
          bundle.add(prefix + "latent." + r.name, f.latent.middleRows(r.row_begin, r.rows));
        json dec = json::array();
        for (std::size_t li = 0; li < f.decoder.size(); ++li) {
          const DecoderLayer& l = f.decoder[li];
          dec.push_back(detail::decoder_layer_meta(l));
          bundle.add(prefix + "decoder." + std::to_string(li) + ".w", l.w);
          if (l.b)
            bundle.add(prefix + "decoder." + std::to_string(li) + ".b", Matrix(l.b->transpose()));
        }
        entry["decoder"] = std::move(dec);
        if (f.stored_row_norms)
          for (const auto& r : f.member_offsets)
            bundle.add(prefix + "norms." + r.name,
                       Matrix(f.stored_row_norms->segment(r.row_begin, r.rows)));
      }
      entry["achieved_cr"] = compression_ratio(f);
    }
    table.push_back(std::move(entry));
  }
  bundle.manifest.extra["modules"] = std::move(table);
  bundle.manifest.extra["meta"] = artifact.meta;
  return bundle;
}

inline CompressedArtifact from_bundle(const io::TensorBundle& bundle) {
  if (!bundle.manifest.extra.contains("modules"))
    throw IoError(IoError::Code::bad_header, "bundle has no compression module table");
  CompressedArtifact artifact;
  artifact.meta = bundle.manifest.extra.value("meta", json::object());
  const json& table = bundle.manifest.extra.at("modules");

  for (std::size_t mi = 0; mi < table.size(); ++mi) {
    const json& entry = table[mi];
    const std::string prefix = table.size() > 1 ? "m" + std::to_string(mi) + "." : "";
    ArtifactModule am;
    const std::string kind = entry.at("kind").get<std::string>();
    if (kind == "prune") {
      SparseModule s;
      s.rows = entry.at("rows").get<Index>();
      s.cols = entry.at("cols").get<Index>();
      const Matrix& idx = bundle.at(prefix + "prune.idx");
      const Matrix& val = bundle.at(prefix + "prune.val");
      for (Index i = 0; i < idx.rows(); ++i)
        s.kept.emplace_back(static_cast<std::uint64_t>(idx(i, 0)), val(i, 0));
      am.sparse = std::move(s);
      am.sparse_member = entry.at("member").get<std::string>();
    } else {
      FactorizedModule f;
      f.kind = kind == "ae"          ? Kind::ae
               : kind == "svd"       ? Kind::svd
               : kind == "fwsvd"     ? Kind::fwsvd
               : kind == "kronecker" ? Kind::kronecker
                                     : throw IoError(IoError::Code::bad_header,
                                                     "unknown module kind " + kind);
      f.mode = entry.at("mode").get<std::string>() == "concatenated" ? Mode::concatenated
                                                                     : Mode::separated;
      f.original_rows = entry.at("original_rows").get<Index>();
      f.original_cols = entry.at("original_cols").get<Index>();
      Index row = 0;
      for (const auto& m : entry.at("members")) {
        MemberRange r;
        r.name = m.at("name").get<std::string>();
        r.row_begin = m.at("row_begin").get<Index>();
        r.rows = m.at("rows").get<Index>();
        if (r.row_begin != row)
          throw IoError(IoError::Code::bad_header, "non-contiguous member table");
        row += r.rows;
        f.member_offsets.push_back(std::move(r));
      }
      if (f.kind == Kind::kronecker) {
        f.kron_b = bundle.at(prefix + "kron.b");
        f.kron_c = bundle.at(prefix + "kron.c");
      } else {
        const Index k = entry.at("k").get<Index>();
        f.latent.resize(row, k);
        for (const auto& r : f.member_offsets)
          f.latent.middleRows(r.row_begin, r.rows) = bundle.at(prefix + "latent." + r.name);
        for (std::size_t li = 0; li < entry.at("decoder").size(); ++li) {
          const json& lm = entry.at("decoder")[li];
          DecoderLayer l;
          l.w = bundle.at(prefix + "decoder." + std::to_string(li) + ".w");
          l.act = ad::activation_from_string(lm.at("activation").get<std::string>());
          if (lm.at("has_bias").get<bool>())
            l.b = Vector(bundle.at(prefix + "decoder." + std::to_string(li) + ".b").row(0));
          f.decoder.push_back(std::move(l));
        }
        if (entry.at("has_norms").get<bool>()) {
          Vector norms(row);
          for (const auto& r : f.member_offsets)
            norms.segment(r.row_begin, r.rows) = bundle.at(prefix + "norms." + r.name).col(0);
          f.stored_row_norms = std::move(norms);
        }
      }
      am.factorized = std::move(f);
    }
    artifact.modules.push_back(std::move(am));
  }
  return artifact;
}

}  // namespace matcrush::compress

#endif  // MATCRUSH_ARTIFACT_HPP_
