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

// Randomized equivalence suites over many caches: attention transforms vs the
// kernel regressions they correspond to.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "skam/regression.hpp"

namespace skam {

enum class Suite { Prop1, Gauss, NormRelu, TopK };

inline Suite parse_suite(std::string_view name) {
  if (name == "prop1") return Suite::Prop1;
  if (name == "gauss") return Suite::Gauss;
  if (name == "normrelu") return Suite::NormRelu;
  if (name == "topk") return Suite::TopK;
  fail(ErrorCode::InvalidSpec, "unknown suite '" + std::string(name) + "'");
}

struct VerifyOptions {
  std::size_t trials = 200;
  std::size_t max_n = 64;     // largest cache size n - 1
  std::size_t max_dim = 16;   // largest key dimension d
  std::uint64_t seed = 0;
  std::vector<double> alphas{2.0, 1.5, 4.0 / 3.0};
  std::vector<double> gammas{0.5, 1.0, 2.0};
};

struct SuiteCheck {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::size_t evaluations = 0;
  std::size_t degenerate = 0;  // cases the check could not score

  bool passed() const { return degenerate == 0 && max_error <= tolerance; }
};

namespace detail {

/// Trial-local cache with size in [1, max_n] and dimension in [2, max_dim].
inline KeyValueCache trial_cache(const VerifyOptions& opt, std::uint64_t trial) {
  Rng rng(derive_seed(opt.seed, trial));
  const std::size_t n = 1 + rng.below(std::max<std::size_t>(opt.max_n, 1));
  const std::size_t d = 2 + rng.below(std::max<std::size_t>(opt.max_dim, 2) - 1);
  return random_cache(rng, n, d, d);
}

inline void record(SuiteCheck& check, double err) {
  ++check.evaluations;
  if (std::isnan(err)) {
    ++check.degenerate;
    return;
  }
  check.max_error = std::max(check.max_error, err);
}

}  // namespace detail

/// Entmax attention vs auto-normalized rectified polynomial regression, one
/// check per alpha (tolerance 1e-10 for sparsemax, 1e-8 for bisection).
inline std::vector<SuiteCheck> run_prop1_suite(const VerifyOptions& opt) {
  std::vector<SuiteCheck> checks;
  for (double a : opt.alphas) {
    const int r = entmax_kernel_order(a);
    checks.push_back({"prop1 alpha=" + std::to_string(1.0 + 1.0 / r), 0.0, r == 1 ? 1e-10 : 1e-8});
  }
  for (std::uint64_t t = 0; t < opt.trials; ++t) {
    const auto cache = detail::trial_cache(opt, t);
    for (std::size_t ai = 0; ai < opt.alphas.size(); ++ai)
      for (double g : opt.gammas) detail::record(checks[ai], verify_equivalence(cache, opt.alphas[ai], g).max_abs_diff);
  }
  return checks;
}

/// Softmax at temperature gamma vs Gaussian regression with h^2 = gamma.
inline std::vector<SuiteCheck> run_gauss_suite(const VerifyOptions& opt) {
  SuiteCheck check{"gauss softmax~gaussian", 0.0, 1e-10};
  for (std::uint64_t t = 0; t < opt.trials; ++t) {
    const auto cache = detail::trial_cache(opt, t);
    for (double g : opt.gammas) {
      const auto attn = attention_estimate(cache, {TransformKind::Softmax, 0.0, 1, 0.0, g});
      const auto nw = nadaraya_watson(cache, KernelSpec::gaussian(std::sqrt(g)));
      detail::record(check, max_abs_diff(attn, nw));
    }
  }
  return {check};
}

/// Normalized ReLU vs fixed-bandwidth Epanechnikov, at h = sqrt(2) (b = 0)
/// and at one random bandwidth in [0.5, 3] per cache. When both sides have
/// empty support the case scores 0.
inline std::vector<SuiteCheck> run_normrelu_suite(const VerifyOptions& opt) {
  SuiteCheck check{"normrelu normrelu~epanechnikov", 0.0, 1e-10};
  for (std::uint64_t t = 0; t < opt.trials; ++t) {
    const auto cache = detail::trial_cache(opt, t);
    Rng rng(derive_seed(opt.seed ^ 0x5EEDULL, t));
    for (double h : {std::sqrt(2.0), rng.uniform(0.5, 3.0)}) {
      const auto rep = verify_normrelu_epanechnikov(cache, h);
      detail::record(check, rep.max_abs_diff);
    }
  }
  return {check};
}

/// Top-k uniform vs a uniform kernel whose radius admits exactly the k nearest
/// keys, and top-k softmax vs the k-truncated Gaussian with h^2 = gamma.
inline std::vector<SuiteCheck> run_topk_suite(const VerifyOptions& opt) {
  SuiteCheck uniform{"topk topk_uniform~uniform_knn", 0.0, 1e-12};
  SuiteCheck truncated{"topk topk_softmax~truncated_gaussian", 0.0, 1e-10};
  for (std::uint64_t t = 0; t < opt.trials; ++t) {
    const auto cache = detail::trial_cache(opt, t);
    Rng rng(derive_seed(opt.seed ^ 0x70CCULL, t));
    const std::size_t n = cache.size();
    const std::size_t k = 1 + rng.below(n);

    std::vector<double> sq;
    for (double s : cache.scores()) sq.push_back(dot_to_sqdist(s));
    std::sort(sq.begin(), sq.end());
    if (k < n && !(sq[k - 1] < sq[k])) {
      detail::record(uniform, std::nan(""));  // tied k-th neighbour, no radius separates it
    } else {
      const double radius2 = k == n ? 5.0 : 0.5 * (sq[k - 1] + sq[k]);  // every squared distance is <= 4
      const auto attn = attention_estimate(cache, {TransformKind::TopKUniform, 0.0, k, 0.0, 1.0});
      const auto nw = nadaraya_watson(cache, KernelSpec::uniform(std::sqrt(radius2)));
      detail::record(uniform, max_abs_diff(attn, nw));
    }

    for (double g : opt.gammas) {
      const auto attn = attention_estimate(cache, {TransformKind::TopKSoftmax, 0.0, k, 0.0, g});
      const auto nw = nadaraya_watson(cache, KernelSpec::truncated_gaussian(k, std::sqrt(g)));
      detail::record(truncated, max_abs_diff(attn, nw));
    }
  }
  return {uniform, truncated};
}

inline std::vector<SuiteCheck> run_suite(Suite suite, const VerifyOptions& opt) {
  switch (suite) {
    case Suite::Prop1: return run_prop1_suite(opt);
    case Suite::Gauss: return run_gauss_suite(opt);
    case Suite::NormRelu: return run_normrelu_suite(opt);
    case Suite::TopK: return run_topk_suite(opt);
  }
  return {};
}

}  // namespace skam
