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

// Smoothing kernels as functions of the squared distance ||u||^2. Kernels are
// unnormalized with peak value 1; only Nadaraya-Watson ratios are ever formed,
// so the 1/h^d density factor never matters.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

#include "skam/common.hpp"

namespace skam {

enum class KernelKind { Gaussian, RectPoly, Uniform, TruncatedGaussian, ReLUMax };

struct KernelSpec {
  KernelKind kind = KernelKind::Gaussian;
  double bandwidth = 1.0;  // h; plays delta_max for Uniform
  int order = 1;           // r for RectPoly
  std::size_t k = 1;       // neighbour count for TruncatedGaussian
  double b = 1.0;          // margin for ReLUMax

  static KernelSpec gaussian(double h) { return {KernelKind::Gaussian, h}; }
  static KernelSpec rect_poly(int r, double h) { return {KernelKind::RectPoly, h, r}; }
  static KernelSpec epanechnikov(double h) { return rect_poly(1, h); }
  static KernelSpec biweight(double h) { return rect_poly(2, h); }
  static KernelSpec triweight(double h) { return rect_poly(3, h); }
  static KernelSpec uniform(double radius) { return {KernelKind::Uniform, radius}; }
  static KernelSpec truncated_gaussian(std::size_t k, double h) {
    KernelSpec s{KernelKind::TruncatedGaussian, h};
    s.k = k;
    return s;
  }
  static KernelSpec relumax(double b, double h) {
    KernelSpec s{KernelKind::ReLUMax, h};
    s.b = b;
    return s;
  }

  void validate() const {
    require(std::isfinite(bandwidth) && bandwidth > 0.0, ErrorCode::InvalidSpec, "bandwidth must be > 0");
    if (kind == KernelKind::RectPoly) require(order >= 1, ErrorCode::InvalidSpec, "order r must be >= 1");
    if (kind == KernelKind::TruncatedGaussian) require(k >= 1, ErrorCode::InvalidK, "k must be >= 1");
    if (kind == KernelKind::ReLUMax) require(b > 0.0, ErrorCode::InvalidSpec, "margin b must be > 0");
  }
};

/// Unnormalized kernel profile K(u / h) at ||u||^2 = sq_dist.
///
/// TruncatedGaussian returns its Gaussian profile; the k-nearest restriction
/// needs the whole key set and is applied by the regression layer. ReLUMax is
/// evaluated with its anchor at the best attainable match (a key equal to the
/// query, dot product 1) and rescaled to peak 1; the data-anchored form lives
/// in `relumax_kernel_weight`.
inline double kernel_weight(const KernelSpec& spec, double sq_dist) {
  spec.validate();
  require(std::isfinite(sq_dist) && sq_dist >= 0.0, ErrorCode::InvalidDistance,
          "squared distance must be finite and >= 0");
  const double h2 = spec.bandwidth * spec.bandwidth;
  switch (spec.kind) {
    case KernelKind::Gaussian:
    case KernelKind::TruncatedGaussian:
      return std::exp(-sq_dist / (2.0 * h2));
    case KernelKind::RectPoly: {
      const double base = 1.0 - sq_dist / h2;
      if (base <= 0.0) return 0.0;
      double w = 1.0;
      for (int i = 0; i < spec.order; ++i) w *= base;
      return w;
    }
    case KernelKind::Uniform:
      return sq_dist <= h2 ? 1.0 : 0.0;
    case KernelKind::ReLUMax:
      return std::max(1.0 - sq_dist / (2.0 * spec.b * h2), 0.0);
  }
  fail(ErrorCode::InvalidSpec, "unhandled kernel kind");
}

/// Max-anchored Epanechnikov weight [b + (dot - max_dot) / h^2]_+.
inline double relumax_kernel_weight(double dot_product, double max_dot, double h, double b) {
  return std::max(b + (dot_product - max_dot) / (h * h), 0.0);
}

/// ||k - q||^2 = 2 (1 - k.q) for unit vectors. Dot products slightly outside
/// [-1, 1] from rounding are clamped.
inline double dot_to_sqdist(double dot_product) {
  require(std::isfinite(dot_product) && std::abs(dot_product) <= 1.0 + 1e-6, ErrorCode::NotUnitNorm,
          "dot product " + std::to_string(dot_product) + " impossible for unit vectors");
  const double c = std::clamp(dot_product, -1.0, 1.0);
  return 2.0 * (1.0 - c);
}

}  // namespace skam
