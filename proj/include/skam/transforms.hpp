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

// Score-to-simplex transforms: softmax, sparsemax, alpha-entmax, normalized
// ReLU, ReLUmax, top-k uniform and top-k softmax, together with their
// Jacobian-vector and vector-Jacobian products.
//
// Every transform takes raw scores z and a temperature gamma and works on
// z / gamma. All arithmetic is double precision.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "skam/common.hpp"

namespace skam {

enum class TransformKind { Softmax, Sparsemax, Entmax, NormReLU, ReLUmax, TopKUniform, TopKSoftmax };

inline std::string_view to_string(TransformKind kind) {
  switch (kind) {
    case TransformKind::Softmax: return "softmax";
    case TransformKind::Sparsemax: return "sparsemax";
    case TransformKind::Entmax: return "entmax";
    case TransformKind::NormReLU: return "norm_relu";
    case TransformKind::ReLUmax: return "relumax";
    case TransformKind::TopKUniform: return "topk_uniform";
    case TransformKind::TopKSoftmax: return "topk_softmax";
  }
  return "unknown";
}

inline TransformKind parse_transform_kind(std::string_view name) {
  for (auto kind : {TransformKind::Softmax, TransformKind::Sparsemax, TransformKind::Entmax,
                    TransformKind::NormReLU, TransformKind::ReLUmax, TransformKind::TopKUniform,
                    TransformKind::TopKSoftmax}) {
    if (to_string(kind) == name) return kind;
  }
  fail(ErrorCode::InvalidSpec, "unknown transform kind '" + std::string(name) + "'");
}

/// A parameterized transform. Only the fields relevant to `kind` are read:
/// alpha for Entmax, k for the top-k kinds, b for NormReLU (offset) and
/// ReLUmax (margin).
struct TransformSpec {
  TransformKind kind = TransformKind::Softmax;
  double alpha = 1.5;
  std::size_t k = 1;
  double b = 1.0;
  double gamma = 1.0;

  void validate() const {
    require(std::isfinite(gamma) && gamma > 0.0, ErrorCode::InvalidGamma, "gamma must be > 0");
    if (kind == TransformKind::Entmax)
      require(std::isfinite(alpha) && alpha > 1.0, ErrorCode::InvalidAlpha, "alpha must be > 1");
    if (kind == TransformKind::TopKUniform || kind == TransformKind::TopKSoftmax)
      require(k >= 1, ErrorCode::InvalidK, "k must be >= 1");
    if (kind == TransformKind::ReLUmax)
      require(std::isfinite(b) && b > 0.0, ErrorCode::InvalidSpec, "ReLUmax margin b must be > 0");
    if (kind == TransformKind::NormReLU)
      require(std::isfinite(b), ErrorCode::InvalidSpec, "NormReLU offset b must be finite");
  }

  /// True for transforms whose output is shift invariant (z + c1 -> same weights).
  bool shift_invariant() const { return kind != TransformKind::NormReLU; }
};

/// A point on the simplex plus the bookkeeping each transform exposes.
struct AttentionWeights {
  std::vector<double> weights;
  std::optional<double> threshold;   // tau, on the transform's own scale
  std::vector<std::size_t> support;  // sorted indices with weight > 0
  bool degenerate = false;           // NormReLU fell back to uniform
};

namespace detail {

inline void check_scores(std::span<const double> z, double gamma) {
  require(!z.empty(), ErrorCode::InvalidScores, "score vector is empty");
  require(all_finite(z), ErrorCode::InvalidScores, "score vector has non-finite entries");
  require(std::isfinite(gamma) && gamma > 0.0, ErrorCode::InvalidGamma, "gamma must be > 0");
}

inline void fill_support(AttentionWeights& out) {
  out.support.clear();
  for (std::size_t i = 0; i < out.weights.size(); ++i)
    if (out.weights[i] > 0.0) out.support.push_back(i);
}

/// Index of the first maximal entry.
inline std::size_t argmax(std::span<const double> z) {
  return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
}

/// The k largest entries, lower index winning ties; returned in ascending index order.
inline std::vector<std::size_t> top_k_indices(std::span<const double> z, std::size_t k) {
  require(k >= 1 && k <= z.size(), ErrorCode::InvalidK,
          "k=" + std::to_string(k) + " outside [1, " + std::to_string(z.size()) + "]");
  std::vector<std::size_t> idx(z.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return z[a] > z[b] || (z[a] == z[b] && a < b); });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// x^p for x >= 0 with fast paths for the small integer exponents used by
/// the biweight/triweight family.
inline double rect_pow(double x, double p) {
  if (x <= 0.0) return 0.0;
  if (p == 1.0) return x;
  if (p == 2.0) return x * x;
  if (p == 3.0) return x * x * x;
  return std::pow(x, p);
}

}  // namespace detail

inline AttentionWeights softmax(std::span<const double> z, double gamma = 1.0) {
  detail::check_scores(z, gamma);
  AttentionWeights out;
  out.weights.resize(z.size());
  const double m = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out.weights[i] = std::exp((z[i] - m) / gamma);
    sum += out.weights[i];
  }
  for (double& w : out.weights) w /= sum;
  detail::fill_support(out);
  return out;
}

/// Euclidean projection of z / gamma onto the simplex (sort-based, exact).
inline AttentionWeights sparsemax(std::span<const double> z, double gamma = 1.0) {
  detail::check_scores(z, gamma);
  const std::size_t n = z.size();
  std::vector<double> sorted(n);
  for (std::size_t i = 0; i < n; ++i) sorted[i] = z[i] / gamma;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());

  double cumsum = 0.0;
  double support_sum = sorted[0];
  std::size_t support_size = 1;
  for (std::size_t k = 1; k <= n; ++k) {
    cumsum += sorted[k - 1];
    if (1.0 + static_cast<double>(k) * sorted[k - 1] > cumsum) {
      support_size = k;
      support_sum = cumsum;
    }
  }
  const double tau = (support_sum - 1.0) / static_cast<double>(support_size);

  AttentionWeights out;
  out.weights.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.weights[i] = std::max(z[i] / gamma - tau, 0.0);
  out.threshold = tau;
  detail::fill_support(out);
  return out;
}

/// alpha-entmax of z / gamma. The threshold tau lives on the (alpha-1) z / gamma
/// scale and is found by bisection; weights are rebuilt from the final tau
/// without renormalization. alpha == 2 is delegated to the exact sparsemax.
inline AttentionWeights entmax(std::span<const double> z, double alpha, double gamma = 1.0) {
  require(std::isfinite(alpha) && alpha > 1.0, ErrorCode::InvalidAlpha,
          "entmax needs alpha > 1 (request softmax explicitly)");
  if (alpha == 2.0) return sparsemax(z, gamma);
  detail::check_scores(z, gamma);

  const std::size_t n = z.size();
  const double am1 = alpha - 1.0;
  const double power = 1.0 / am1;
  std::vector<double> u(n);
  for (std::size_t i = 0; i < n; ++i) u[i] = am1 * z[i] / gamma;
  std::vector<double> sorted = u;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());

  auto mass = [&](double tau) {
    double s = 0.0;
    for (double v : sorted) {
      if (v <= tau) break;
      s += detail::rect_pow(v - tau, power);
    }
    return s - 1.0;
  };

  double lo = sorted[0] - 1.0;  // mass(lo) >= 0
  double hi = sorted[0];        // mass(hi) == -1
  double best_tau = lo;
  double best_err = std::abs(mass(lo));
  for (int it = 0; it < 200 && best_err > 1e-12; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double f = mass(mid);
    if (std::abs(f) < best_err) {
      best_err = std::abs(f);
      best_tau = mid;
    }
    if (f > 0.0)
      lo = mid;
    else
      hi = mid;
    if (!(hi > lo)) break;
  }

  AttentionWeights out;
  out.weights.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.weights[i] = detail::rect_pow(u[i] - best_tau, power);
  out.threshold = best_tau;
  detail::fill_support(out);
  return out;
}

/// Tsallis alpha-entropy (1 / (alpha (alpha - 1))) (1 - sum p^alpha).
inline double tsallis_entropy(std::span<const double> p, double alpha) {
  require(std::isfinite(alpha) && alpha > 1.0, ErrorCode::InvalidAlpha, "alpha must be > 1");
  double s = 0.0;
  for (double x : p) s += x > 0.0 ? std::pow(x, alpha) : 0.0;
  return (1.0 - s) / (alpha * (alpha - 1.0));
}

/// [z / gamma + b]_+ normalized. When every pre-activation is non-positive the
/// ratio is 0/0; the result is then uniform with `degenerate` set.
inline AttentionWeights norm_relu(std::span<const double> z, double gamma, double b) {
  detail::check_scores(z, gamma);
  require(std::isfinite(b), ErrorCode::InvalidSpec, "offset b must be finite");
  AttentionWeights out;
  out.weights.resize(z.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out.weights[i] = std::max(z[i] / gamma + b, 0.0);
    sum += out.weights[i];
  }
  if (sum > 0.0) {
    for (double& w : out.weights) w /= sum;
  } else {
    std::fill(out.weights.begin(), out.weights.end(), 1.0 / static_cast<double>(z.size()));
    out.degenerate = true;
  }
  detail::fill_support(out);
  return out;
}

/// Max-anchored rectifier [b + (z - max z) / gamma]_+, normalized. The anchor
/// always contributes b > 0, so the denominator never vanishes. The reported
/// threshold is max(z)/gamma - b: index i is active iff z_i / gamma exceeds it.
inline AttentionWeights relumax(std::span<const double> z, double gamma, double b) {
  detail::check_scores(z, gamma);
  require(std::isfinite(b) && b > 0.0, ErrorCode::InvalidSpec, "margin b must be > 0");
  const double m = *std::max_element(z.begin(), z.end());
  AttentionWeights out;
  out.weights.resize(z.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out.weights[i] = std::max(b + (z[i] - m) / gamma, 0.0);
    sum += out.weights[i];
  }
  for (double& w : out.weights) w /= sum;
  out.threshold = m / gamma - b;
  detail::fill_support(out);
  return out;
}

inline AttentionWeights topk_uniform(std::span<const double> z, std::size_t k) {
  detail::check_scores(z, 1.0);
  AttentionWeights out;
  out.weights.assign(z.size(), 0.0);
  for (std::size_t i : detail::top_k_indices(z, k)) out.weights[i] = 1.0 / static_cast<double>(k);
  detail::fill_support(out);
  return out;
}

inline AttentionWeights topk_softmax(std::span<const double> z, std::size_t k, double gamma = 1.0) {
  detail::check_scores(z, gamma);
  const auto chosen = detail::top_k_indices(z, k);
  double m = z[chosen[0]];
  for (std::size_t i : chosen) m = std::max(m, z[i]);
  AttentionWeights out;
  out.weights.assign(z.size(), 0.0);
  double sum = 0.0;
  for (std::size_t i : chosen) {
    out.weights[i] = std::exp((z[i] - m) / gamma);
    sum += out.weights[i];
  }
  for (std::size_t i : chosen) out.weights[i] /= sum;
  detail::fill_support(out);
  return out;
}

inline AttentionWeights apply_transform(const TransformSpec& spec, std::span<const double> z) {
  spec.validate();
  switch (spec.kind) {
    case TransformKind::Softmax: return softmax(z, spec.gamma);
    case TransformKind::Sparsemax: return sparsemax(z, spec.gamma);
    case TransformKind::Entmax: return entmax(z, spec.alpha, spec.gamma);
    case TransformKind::NormReLU: return norm_relu(z, spec.gamma, spec.b);
    case TransformKind::ReLUmax: return relumax(z, spec.gamma, spec.b);
    case TransformKind::TopKUniform: return topk_uniform(z, spec.k);
    case TransformKind::TopKSoftmax: return topk_softmax(z, spec.k, spec.gamma);
  }
  fail(ErrorCode::InvalidSpec, "unhandled transform kind");
}

namespace detail {

/// (diag(s) - s s^T / sum(s)) v / gamma. Softmax uses s = p (sum 1), sparsemax
/// and entmax use s = p^(2 - alpha) on the support, top-k softmax uses s = p.
inline std::vector<double> symmetric_jvp(std::span<const double> s, std::span<const double> v, double gamma) {
  double ss = 0.0;
  double sv = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    ss += s[i];
    sv += s[i] * v[i];
  }
  std::vector<double> out(s.size());
  const double ratio = ss > 0.0 ? sv / ss : 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = s[i] * (v[i] - ratio) / gamma;
  return out;
}

/// Curvature vector s for the kinds whose Jacobian is symmetric.
inline std::vector<double> curvature(const TransformSpec& spec, const AttentionWeights& p) {
  std::vector<double> s(p.weights.size(), 0.0);
  switch (spec.kind) {
    case TransformKind::Softmax:
    case TransformKind::TopKSoftmax:
      s = p.weights;
      break;
    case TransformKind::Sparsemax:
      for (std::size_t i : p.support) s[i] = 1.0;
      break;
    case TransformKind::Entmax:
      if (spec.alpha == 2.0) {
        for (std::size_t i : p.support) s[i] = 1.0;
      } else {
        for (std::size_t i : p.support) s[i] = std::pow(p.weights[i], 2.0 - spec.alpha);
      }
      break;
    default:
      break;
  }
  return s;
}

/// Pre-normalization responses r and their gate for the two rectifier kinds.
struct RectifiedResponses {
  std::vector<double> r;
  double total = 0.0;
  std::size_t anchor = 0;  // ReLUmax argmax
};

inline RectifiedResponses rectified(const TransformSpec& spec, std::span<const double> z) {
  RectifiedResponses out;
  out.r.resize(z.size());
  if (spec.kind == TransformKind::ReLUmax) {
    out.anchor = argmax(z);
    const double m = z[out.anchor];
    for (std::size_t i = 0; i < z.size(); ++i) out.r[i] = std::max(spec.b + (z[i] - m) / spec.gamma, 0.0);
  } else {
    for (std::size_t i = 0; i < z.size(); ++i) out.r[i] = std::max(z[i] / spec.gamma + spec.b, 0.0);
  }
  for (double x : out.r) out.total += x;
  return out;
}

}  // namespace detail

/// J(z) v. Inside a region of constant support the rectifier kinds are
/// piecewise linear; boundary points are treated as interior of the current
/// support. Top-k uniform is locally constant.
inline std::vector<double> transform_jvp(const TransformSpec& spec, std::span<const double> z,
                                         std::span<const double> v) {
  require(v.size() == z.size(), ErrorCode::ShapeError, "jvp direction length mismatch");
  const AttentionWeights p = skam::apply_transform(spec, z);
  switch (spec.kind) {
    case TransformKind::Softmax:
    case TransformKind::Sparsemax:
    case TransformKind::Entmax:
    case TransformKind::TopKSoftmax:
      return detail::symmetric_jvp(detail::curvature(spec, p), v, spec.gamma);
    case TransformKind::TopKUniform:
      return std::vector<double>(z.size(), 0.0);
    case TransformKind::NormReLU:
    case TransformKind::ReLUmax: {
      if (p.degenerate) return std::vector<double>(z.size(), 0.0);
      const auto rr = detail::rectified(spec, z);
      std::vector<double> dr(z.size(), 0.0);
      const double anchor_dir = spec.kind == TransformKind::ReLUmax ? v[rr.anchor] : 0.0;
      double dsum = 0.0;
      for (std::size_t i = 0; i < z.size(); ++i) {
        if (rr.r[i] > 0.0) dr[i] = (v[i] - anchor_dir) / spec.gamma;
        dsum += dr[i];
      }
      std::vector<double> out(z.size());
      for (std::size_t i = 0; i < z.size(); ++i) out[i] = (dr[i] - p.weights[i] * dsum) / rr.total;
      return out;
    }
  }
  fail(ErrorCode::InvalidSpec, "unhandled transform kind");
}

/// J(z)^T u. Equal to the jvp for the symmetric kinds.
inline std::vector<double> transform_vjp(const TransformSpec& spec, std::span<const double> z,
                                         std::span<const double> u) {
  require(u.size() == z.size(), ErrorCode::ShapeError, "vjp cotangent length mismatch");
  if (spec.kind != TransformKind::NormReLU && spec.kind != TransformKind::ReLUmax)
    return transform_jvp(spec, z, u);
  const AttentionWeights p = skam::apply_transform(spec, z);
  if (p.degenerate) return std::vector<double>(z.size(), 0.0);
  const auto rr = detail::rectified(spec, z);
  const double wu = dot(p.weights, u);
  std::vector<double> out(z.size(), 0.0);
  double anchor_total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (rr.r[i] <= 0.0) continue;
    const double g = (u[i] - wu) / rr.total / spec.gamma;
    out[i] += g;
    anchor_total += g;
  }
  if (spec.kind == TransformKind::ReLUmax) out[rr.anchor] -= anchor_total;
  return out;
}

}  // namespace skam
