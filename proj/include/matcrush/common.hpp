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

#ifndef MATCRUSH_COMMON_HPP_
#define MATCRUSH_COMMON_HPP_

#include <Eigen/Dense>

#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <stdexcept>
#include <string>

namespace matcrush {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Base class for everything this library throws.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bundle/corpus file problems. The code distinguishes the failure modes the
/// format spec cares about (bad magic vs. truncation vs. non-finite payload).
struct IoError : Error {
  enum class Code {
    open_failed,
    write_failed,
    bad_magic,
    bad_header,
    truncated,
    non_finite,
    empty_tensor,
  };
  IoError(Code c, const std::string& what) : Error(what), code(c) {}
  Code code;
};

/// Shape or argument violations of an operation's precondition.
struct ShapeError : Error {
  using Error::Error;
};

/// Invalid user-facing configuration (CLI args, experiment config JSON).
struct ConfigError : Error {
  using Error::Error;
};

/// A requested compression ratio no latent size can reach.
struct InfeasibleError : Error {
  InfeasibleError(double max_cr, const std::string& what)
      : Error(what), max_achievable_cr(max_cr) {}
  double max_achievable_cr;
};

/// Training produced a non-finite loss.
struct DivergenceError : Error {
  DivergenceError(std::int64_t at_step, const std::string& what)
      : Error(what), step(at_step) {}
  std::int64_t step;
};

enum class LogLevel : int { error = 0, info = 1, debug = 2 };

inline LogLevel log_level() {
  static const LogLevel level = [] {
    const char* env = std::getenv("MATCRUSH_LOG");
    if (env == nullptr) return LogLevel::info;
    if (std::strcmp(env, "error") == 0) return LogLevel::error;
    if (std::strcmp(env, "debug") == 0) return LogLevel::debug;
    return LogLevel::info;
  }();
  return level;
}

inline void log_at(LogLevel level, const char* fmt, ...) {
  if (static_cast<int>(level) > static_cast<int>(log_level())) return;
  const char* tag = level == LogLevel::error  ? "error"
                    : level == LogLevel::info ? "info"
                                              : "debug";
  std::fprintf(stderr, "[matcrush:%s] ", tag);
  va_list args;
  va_start(args, fmt);
  std::vfprintf(stderr, fmt, args);
  va_end(args);
  std::fputc('\n', stderr);
}

#define MATCRUSH_LOG_ERROR(...) ::matcrush::log_at(::matcrush::LogLevel::error, __VA_ARGS__)
#define MATCRUSH_LOG_INFO(...) ::matcrush::log_at(::matcrush::LogLevel::info, __VA_ARGS__)
#define MATCRUSH_LOG_DEBUG(...) ::matcrush::log_at(::matcrush::LogLevel::debug, __VA_ARGS__)

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// FNV-1a, used for stable config hashes in reports.
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

}  // namespace matcrush

#endif  // MATCRUSH_COMMON_HPP_
