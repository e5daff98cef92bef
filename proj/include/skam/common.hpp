/* Copyright 2026 The skam Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace skam {

enum class ErrorCode {
  InvalidScores,
  InvalidAlpha,
  InvalidGamma,
  InvalidK,
  InvalidSpec,
  InvalidDistance,
  NotUnitNorm,
  DegenerateSupport,
  InvalidThreshold,
  ShapeError,
  InvalidLoss,
  InvalidToken,
  NumericalError,
  GenerationError,
  EvalError,
  ConfigError,
  CheckpointError,
  IoError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidScores: return "InvalidScores";
    case ErrorCode::InvalidAlpha: return "InvalidAlpha";
    case ErrorCode::InvalidGamma: return "InvalidGamma";
    case ErrorCode::InvalidK: return "InvalidK";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::InvalidDistance: return "InvalidDistance";
    case ErrorCode::NotUnitNorm: return "NotUnitNorm";
    case ErrorCode::DegenerateSupport: return "DegenerateSupport";
    case ErrorCode::InvalidThreshold: return "InvalidThreshold";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::InvalidLoss: return "InvalidLoss";
    case ErrorCode::InvalidToken: return "InvalidToken";
    case ErrorCode::NumericalError: return "NumericalError";
    case ErrorCode::GenerationError: return "GenerationError";
    case ErrorCode::EvalError: return "EvalError";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::CheckpointError: return "CheckpointError";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

/// Every failure in the library is reported as an `Error` carrying a code
/// that callers (the CLI in particular) can map to exit statuses.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

/// Dense row-major matrix of doubles. Used by the regression harness, where
/// everything runs in 64-bit.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace skam
