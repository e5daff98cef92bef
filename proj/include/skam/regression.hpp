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

// Nadaraya-Watson estimation over a key/value cache, the attention-side
// estimate over the same cache, and the checks that tie the two together.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "skam/common.hpp"
#include "skam/kernels.hpp"
#include "skam/rng.hpp"
#include "skam/transforms.hpp"

namespace skam {

/// Keys k_1..k_{n-1}, their values, and the query q = k_n. Keys and query are
/// rescaled to unit norm on construction; a zero vector is rejected.
class KeyValueCache {
 public:
  KeyValueCache(Matrix keys, Matrix values, std::vector<double> query)
      : keys_(std::move(keys)), values_(std::move(values)), query_(std::move(query)) {
    require(keys_.rows >= 1, ErrorCode::ShapeError, "cache needs at least one key");
    require(values_.rows == keys_.rows, ErrorCode::ShapeError, "keys and values differ in row count");
    require(query_.size() == keys_.cols, ErrorCode::ShapeError, "query dimension differs from key dimension");
    require(all_finite(keys_.data) && all_finite(values_.data) && all_finite(query_), ErrorCode::InvalidScores,
            "cache contains non-finite entries");
    for (std::size_t i = 0; i < keys_.rows; ++i) normalize(keys_.row(i));
    normalize(query_);
  }

  std::size_t size() const { return keys_.rows; }
  std::size_t key_dim() const { return keys_.cols; }
  std::size_t value_dim() const { return values_.cols; }
  const Matrix& keys() const { return keys_; }
  const Matrix& values() const { return values_; }
  std::span<const double> query() const { return query_; }

  /// K q.
  std::vector<double> scores() const {
    std::vector<double> s(size());
    for (std::size_t i = 0; i < size(); ++i) s[i] = dot(keys_.row(i), query_);
    return s;
  }

  /// sum_i w_i v_i.
  std::vector<double> combine(std::span<const double> weights) const {
    std::vector<double> out(value_dim(), 0.0);
    for (std::size_t i = 0; i < size(); ++i) {
      if (weights[i] == 0.0) continue;
      const auto v = values_.row(i);
      for (std::size_t j = 0; j < out.size(); ++j) out[j] += weights[i] * v[j];
    }
    return out;
  }

 private:
  static void normalize(std::span<double> v) {
    const double n = l2_norm(v);
    require(n > 0.0, ErrorCode::NotUnitNorm, "zero vector cannot be normalized");
    for (double& x : v) x /= n;
  }

  Matrix keys_;
  Matrix values_;
  std::vector<double> query_;
};

/// Keys and query uniform on the unit sphere, values standard normal.
inline KeyValueCache random_cache(Rng& rng, std::size_t size, std::size_t dim, std::size_t value_dim) {
  auto sphere = [&](std::span<double> v) {
    double n = 0.0;
    do {
      for (double& x : v) x = rng.normal();
      n = l2_norm(v);
    } while (n < 1e-12);
  };
  Matrix keys(size, dim);
  Matrix values(size, value_dim);
  std::vector<double> query(dim);
  for (std::size_t i = 0; i < size; ++i) sphere(keys.row(i));
  for (double& x : values.data) x = rng.normal();
  sphere(query);
  return {std::move(keys), std::move(values), std::move(query)};
}

/// Normalized Nadaraya-Watson weights K_h(k_i - q) / sum_j K_h(k_j - q).
/// Throws DegenerateSupport when every kernel weight is zero.
inline std::vector<double> kernel_regression_weights(const KeyValueCache& cache, const KernelSpec& spec) {
  spec.validate();
  const auto dots = cache.scores();
  const std::size_t n = dots.size();
  std::vector<double> w(n, 0.0);
  std::vector<double> sq(n);
  for (std::size_t i = 0; i < n; ++i) sq[i] = dot_to_sqdist(dots[i]);
  const double h2 = spec.bandwidth * spec.bandwidth;

  switch (spec.kind) {
    case KernelKind::Gaussian: {
      // Peak factored out; it cancels in the ratio and keeps exp() in range.
      const double sq_min = *std::min_element(sq.begin(), sq.end());
      for (std::size_t i = 0; i < n; ++i) w[i] = std::exp(-(sq[i] - sq_min) / (2.0 * h2));
      break;
    }
    case KernelKind::TruncatedGaussian: {
      const auto neighbours = detail::top_k_indices(dots, spec.k);
      double sq_min = std::numeric_limits<double>::infinity();
      for (std::size_t i : neighbours) sq_min = std::min(sq_min, sq[i]);
      for (std::size_t i : neighbours) w[i] = std::exp(-(sq[i] - sq_min) / (2.0 * h2));
      break;
    }
    case KernelKind::ReLUMax: {
      const double m = *std::max_element(dots.begin(), dots.end());
      for (std::size_t i = 0; i < n; ++i) w[i] = relumax_kernel_weight(dots[i], m, spec.bandwidth, spec.b);
      break;
    }
    case KernelKind::RectPoly:
    case KernelKind::Uniform:
      for (std::size_t i = 0; i < n; ++i) w[i] = kernel_weight(spec, sq[i]);
      break;
  }

  double total = 0.0;
  for (double x : w) total += x;
  require(total > 0.0, ErrorCode::DegenerateSupport, "all kernel weights are zero");
  for (double& x : w) x /= total;
  return w;
}

/// v_hat(q) = sum_i K_h(k_i - q) v_i / sum_j K_h(k_j - q).
inline std::vector<double> nadaraya_watson(const KeyValueCache& cache, const KernelSpec& spec) {
  return cache.combine(kernel_regression_weights(cache, spec));
}

/// V^T pi(K q / gamma).
inline std::vector<double> attention_estimate(const KeyValueCache& cache, const TransformSpec& spec) {
  const auto p = skam::apply_transform(spec, cache.scores());
  return cache.combine(p.weights);
}

/// Adaptive bandwidth h = sqrt(2 - 2 r gamma tau) under which the auto-normalized
/// order-r rectified polynomial kernel reproduces (1 + 1/r)-entmax.
inline double recover_bandwidth(double tau, double gamma, int r) {
  require(r >= 1, ErrorCode::InvalidSpec, "order r must be >= 1");
  const double radicand = 2.0 - 2.0 * r * gamma * tau;
  require(std::isfinite(radicand) && radicand >= 0.0, ErrorCode::InvalidThreshold,
          "2 - 2 r gamma tau = " + std::to_string(radicand) + " < 0");
  return std::sqrt(radicand);
}

/// Integer kernel order r with alpha = 1 + 1/r (tolerating a truncated decimal alpha).
inline int entmax_kernel_order(double alpha) {
  require(std::isfinite(alpha) && alpha > 1.0, ErrorCode::InvalidAlpha, "alpha must be > 1");
  const double r = 1.0 / (alpha - 1.0);
  const double rounded = std::round(r);
  require(rounded >= 1.0 && std::abs(r - rounded) <= 1e-6 * rounded, ErrorCode::InvalidAlpha,
          "alpha=" + std::to_string(alpha) + " is not of the form 1 + 1/r for integer r");
  return static_cast<int>(rounded);
}

struct EquivalenceReport {
  double alpha = 0.0;
  double gamma = 0.0;
  double tau = 0.0;
  double recovered_bandwidth = 0.0;
  double max_abs_diff = 0.0;     // estimate difference (infinity norm)
  double max_weight_diff = 0.0;  // elementwise attention vs kernel weights
  bool degenerate = false;
};

/// Runs entmax attention and auto-normalized rectified-polynomial regression
/// over the same cache and reports how far apart they are.
inline EquivalenceReport verify_equivalence(const KeyValueCache& cache, double alpha, double gamma) {
  require(std::isfinite(gamma) && gamma > 0.0, ErrorCode::InvalidGamma, "gamma must be > 0");
  const int r = entmax_kernel_order(alpha);
  EquivalenceReport report;
  report.alpha = 1.0 + 1.0 / r;
  report.gamma = gamma;

  const auto p = entmax(cache.scores(), report.alpha, gamma);
  report.tau = *p.threshold;
  report.recovered_bandwidth = recover_bandwidth(report.tau, gamma, r);

  try {
    const auto w = kernel_regression_weights(cache, KernelSpec::rect_poly(r, report.recovered_bandwidth));
    report.max_weight_diff = max_abs_diff(w, p.weights);
    report.max_abs_diff = max_abs_diff(cache.combine(w), cache.combine(p.weights));
  } catch (const Error& e) {
    if (e.code() != ErrorCode::DegenerateSupport) throw;
    report.degenerate = true;
    report.max_abs_diff = std::numeric_limits<double>::quiet_NaN();
    report.max_weight_diff = std::numeric_limits<double>::quiet_NaN();
  }
  return report;
}

struct NormReluReport {
  double max_abs_diff = 0.0;
  bool degenerate = false;  // both sides had empty support
};

/// Fixed-bandwidth Epanechnikov regression against normalized ReLU attention
/// with gamma = h^2 / 2 and b = 1 - 2 / h^2.
inline NormReluReport verify_normrelu_epanechnikov(const KeyValueCache& cache, double h) {
  require(std::isfinite(h) && h > 0.0, ErrorCode::InvalidSpec, "bandwidth must be > 0");
  const double h2 = h * h;
  const TransformSpec spec{TransformKind::NormReLU, 0.0, 1, 1.0 - 2.0 / h2, h2 / 2.0};
  const auto p = skam::apply_transform(spec, cache.scores());
  NormReluReport report;
  try {
    const auto kernel_side = nadaraya_watson(cache, KernelSpec::epanechnikov(h));
    report.max_abs_diff = max_abs_diff(kernel_side, cache.combine(p.weights));
    if (p.degenerate) report.max_abs_diff = std::numeric_limits<double>::infinity();
  } catch (const Error& e) {
    if (e.code() != ErrorCode::DegenerateSupport) throw;
    report.degenerate = true;
    report.max_abs_diff = p.degenerate ? 0.0 : std::numeric_limits<double>::infinity();
  }
  return report;
}

}  // namespace skam
