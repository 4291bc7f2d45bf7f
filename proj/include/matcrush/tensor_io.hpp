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
// Named-matrix bundle files: 8-byte magic "MCRSH\x00\x01\x00", u64le header
// length, UTF-8 JSON header (entry table + manifest), then raw row-major
// little-endian f64 payloads at absolute offsets.

#ifndef MATCRUSH_TENSOR_IO_HPP_
#define MATCRUSH_TENSOR_IO_HPP_

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "matcrush/common.hpp"

namespace matcrush::io {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "bundle format assumes a little-endian host");

inline constexpr std::array<unsigned char, 8> kMagic = {'M', 'C', 'R', 'S',
                                                        'H', 0x00, 0x01, 0x00};
inline constexpr int kFormatVersion = 1;

struct Manifest {
  int format_version = kFormatVersion;
  std::uint64_t seed = 0;
  std::string producer = "matcrush";
  json extra = json::object();  // free-form fields (e.g. fisher sample_count)

  json to_json() const {
    json j = extra;
    j["format_version"] = format_version;
    j["seed"] = seed;
    j["producer"] = producer;
    return j;
  }

  static Manifest from_json(const json& j) {
    Manifest m;
    m.extra = j;
    if (j.contains("format_version")) m.format_version = j.at("format_version").get<int>();
    if (j.contains("seed")) m.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("producer")) m.producer = j.at("producer").get<std::string>();
    m.extra.erase("format_version");
    m.extra.erase("seed");
    m.extra.erase("producer");
    return m;
  }
};

/// Named collection of dense f64 matrices. std::map keeps iteration
/// lexicographic by name, which the file format and all consumers rely on.
struct TensorBundle {
  std::map<std::string, Matrix> entries;
  Manifest manifest;

  void add(const std::string& name, Matrix m) {
    if (name.empty()) throw ShapeError("tensor name must be non-empty");
    if (entries.count(name) != 0) throw ShapeError("duplicate tensor name: " + name);
    entries.emplace(name, std::move(m));
  }

  const Matrix& at(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) throw ShapeError("no tensor named: " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return entries.count(name) != 0; }

  bool operator==(const TensorBundle& other) const {
    if (entries.size() != other.entries.size()) return false;
    auto a = entries.begin();
    auto b = other.entries.begin();
    for (; a != entries.end(); ++a, ++b) {
      if (a->first != b->first) return false;
      if (a->second.rows() != b->second.rows() || a->second.cols() != b->second.cols())
        return false;
      // Bit-exact comparison; operator== on doubles would treat -0.0 == 0.0
      // and NaN != NaN.
      if (std::memcmp(a->second.data(), b->second.data(),
                      sizeof(double) * static_cast<std::size_t>(a->second.size())) != 0)
        return false;
    }
    return true;
  }
};

namespace detail {

class File {
 public:
  File(const std::filesystem::path& path, const char* mode)
      : f_(std::fopen(path.string().c_str(), mode)) {
    if (f_ == nullptr)
      throw IoError(IoError::Code::open_failed, "cannot open " + path.string());
  }
  ~File() {
    if (f_ != nullptr) std::fclose(f_);
  }
  File(const File&) = delete;
  File& operator=(const File&) = delete;
  std::FILE* get() const { return f_; }

 private:
  std::FILE* f_;
};

inline void write_all(std::FILE* f, const void* data, std::size_t bytes,
                      const std::string& path) {
  if (bytes != 0 && std::fwrite(data, 1, bytes, f) != bytes)
    throw IoError(IoError::Code::write_failed, "short write to " + path);
}

}  // namespace detail

inline void save_bundle(const TensorBundle& bundle, const std::filesystem::path& path) {
  for (const auto& [name, m] : bundle.entries) {
    if (name.empty()) throw ShapeError("tensor name must be non-empty");
    if (m.rows() == 0 || m.cols() == 0)
      throw IoError(IoError::Code::empty_tensor, "empty tensor: " + name);
    if (!all_finite(m))
      throw IoError(IoError::Code::non_finite, "non-finite values in tensor: " + name);
  }

  // Offsets depend on the header length and vice versa; iterate to the
  // fixpoint (offset digit counts only grow, so this terminates).
  std::uint64_t base = 0;
  std::string header;
  for (int pass = 0; pass < 8; ++pass) {
    json entries = json::array();
    std::uint64_t offset = base;
    for (const auto& [name, m] : bundle.entries) {
      entries.push_back({{"name", name},
                         {"rows", m.rows()},
                         {"cols", m.cols()},
                         {"offset", offset}});
      offset += static_cast<std::uint64_t>(m.size()) * sizeof(double);
    }
    json h = {{"entries", std::move(entries)}, {"manifest", bundle.manifest.to_json()}};
    header = h.dump();
    const std::uint64_t new_base = kMagic.size() + sizeof(std::uint64_t) + header.size();
    if (new_base == base) break;
    base = new_base;
  }

  const std::string p = path.string();
  detail::File file(path, "wb");
  detail::write_all(file.get(), kMagic.data(), kMagic.size(), p);
  const std::uint64_t header_len = header.size();
  detail::write_all(file.get(), &header_len, sizeof(header_len), p);
  detail::write_all(file.get(), header.data(), header.size(), p);
  std::vector<double> row;
  for (const auto& [name, m] : bundle.entries) {
    row.resize(static_cast<std::size_t>(m.cols()));
    for (Index i = 0; i < m.rows(); ++i) {
      for (Index j = 0; j < m.cols(); ++j) row[static_cast<std::size_t>(j)] = m(i, j);
      detail::write_all(file.get(), row.data(), row.size() * sizeof(double), p);
    }
  }
  if (std::fflush(file.get()) != 0 || ::fsync(fileno(file.get())) != 0)
    throw IoError(IoError::Code::write_failed, "flush failed for " + p);
}

inline TensorBundle load_bundle(const std::filesystem::path& path) {
  const std::string p = path.string();
  detail::File file(path, "rb");

  std::array<unsigned char, 8> magic{};
  if (std::fread(magic.data(), 1, magic.size(), file.get()) != magic.size() ||
      magic != kMagic)
    throw IoError(IoError::Code::bad_magic, "bad magic in " + p);

  std::uint64_t header_len = 0;
  if (std::fread(&header_len, 1, sizeof(header_len), file.get()) != sizeof(header_len))
    throw IoError(IoError::Code::truncated, "truncated header length in " + p);

  std::string header(header_len, '\0');
  if (header_len != 0 &&
      std::fread(header.data(), 1, header_len, file.get()) != header_len)
    throw IoError(IoError::Code::truncated, "truncated header in " + p);

  json h;
  try {
    h = json::parse(header);
  } catch (const json::exception& e) {
    throw IoError(IoError::Code::bad_header, "unparseable header in " + p + ": " + e.what());
  }

  TensorBundle bundle;
  try {
    bundle.manifest = Manifest::from_json(h.at("manifest"));
    for (const auto& e : h.at("entries")) {
      const auto name = e.at("name").get<std::string>();
      const auto rows = e.at("rows").get<Index>();
      const auto cols = e.at("cols").get<Index>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      if (name.empty() || rows <= 0 || cols <= 0)
        throw IoError(IoError::Code::bad_header, "degenerate entry in " + p);

      Matrix m(rows, cols);
      if (std::fseek(file.get(), static_cast<long>(offset), SEEK_SET) != 0)
        throw IoError(IoError::Code::truncated, "truncated payload in " + p);
      std::vector<double> row(static_cast<std::size_t>(cols));
      for (Index i = 0; i < rows; ++i) {
        if (std::fread(row.data(), sizeof(double), row.size(), file.get()) != row.size())
          throw IoError(IoError::Code::truncated, "truncated payload in " + p);
        for (Index j = 0; j < cols; ++j) m(i, j) = row[static_cast<std::size_t>(j)];
      }
      if (!all_finite(m))
        throw IoError(IoError::Code::non_finite, "non-finite values in tensor " + name);
      bundle.add(name, std::move(m));
    }
  } catch (const json::exception& e) {
    throw IoError(IoError::Code::bad_header, "malformed header in " + p + ": " + e.what());
  }
  return bundle;
}

}  // namespace matcrush::io

#endif  // MATCRUSH_TENSOR_IO_HPP_
