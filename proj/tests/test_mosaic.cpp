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

#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "skam/mosaic.hpp"
#include "skam/regression.hpp"
#include "skam/rng.hpp"
#include "skam/tasks.hpp"
#include "test_support.hpp"

namespace skam {
namespace {

using TensorD = Tensor<double>;

TensorD random_matrix(Rng& rng, std::size_t r, std::size_t c) {
  auto t = TensorD::matrix(r, c);
  for (double& x : t.data) x = rng.normal();
  return t;
}

std::vector<double> normalized(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

std::vector<double> mat_vec(const TensorD& w, std::span<const double> x) {
  std::vector<double> out(w.rows(), 0.0);
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) out[i] += w.at(i, j) * x[j];
  return out;
}

std::vector<TransformSpec> model_transforms() {
  return {{TransformKind::Softmax},
          {TransformKind::Sparsemax, 2.0},
          {TransformKind::Entmax, 1.5},
          {TransformKind::NormReLU, 1.5, 1, 0.0},
          {TransformKind::ReLUmax, 1.5, 1, 0.5},
          {TransformKind::TopKUniform, 1.5, 3},
          {TransformKind::TopKSoftmax, 1.5, 3}};
}

MosaicConfig small_config(const TransformSpec& spec, std::size_t depth = 2, std::size_t d_model = 16) {
  MosaicConfig cfg;
  cfg.depth = depth;
  cfg.d_model = d_model;
  cfg.heads = 2;
  cfg.vocab = 36;
  cfg.persistent_slots = 8;
  cfg.transform = spec;
  cfg.seed = 5;
  return cfg;
}

std::vector<std::uint32_t> random_tokens(Rng& rng, std::size_t n, std::uint32_t vocab) {
  std::vector<std::uint32_t> t(n);
  for (auto& x : t) x = static_cast<std::uint32_t>(rng.below(vocab));
  return t;
}

// ---------------------------------------------------------------------------
// Memory units
// ---------------------------------------------------------------------------

TEST(ComputeKeys, ZeroLambdaHasNoHistory) {
  Rng rng(41);
  const auto x = random_matrix(rng, 6, 5), w = random_matrix(rng, 3, 5);
  Tape<double> tape;
  const auto k = tape.value(compute_keys(tape, tape.constant(x), tape.constant(w), tape.constant(TensorD::scalar(0.0))));
  for (std::size_t t = 0; t < 6; ++t) {
    const auto expect = normalized(mat_vec(w, x.row(t)));
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(k.at(t, j), expect[j], 1e-14);
  }
}

TEST(ComputeKeys, GeometricSumClosedForm) {
  // x_0 = a, x_t = b afterwards: kbar_t = lambda^t W a + W b (1 - lambda^t) / (1 - lambda) - ... for t >= 1.
  Rng rng(42);
  const double lam = 0.8;
  const auto w = random_matrix(rng, 4, 3);
  auto x = TensorD::matrix(51, 3);
  const auto a = random_matrix(rng, 1, 3), b = random_matrix(rng, 1, 3);
  for (std::size_t t = 0; t < 51; ++t) std::copy_n((t == 0 ? a : b).data.begin(), 3, x.row(t).begin());
  Tape<double> tape;
  const auto k = tape.value(compute_keys(tape, tape.constant(x), tape.constant(w), tape.constant(TensorD::scalar(lam))));
  const auto wa = mat_vec(w, a.data), wb = mat_vec(w, b.data);
  for (std::size_t t : {1u, 7u, 50u}) {
    std::vector<double> kbar(4);
    const double lt = std::pow(lam, static_cast<double>(t));
    for (std::size_t j = 0; j < 4; ++j) kbar[j] = lt * wa[j] + wb[j] * (1.0 - lt) / (1.0 - lam);
    const auto expect = normalized(kbar);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(k.at(t, j), expect[j], 1e-12);
  }
  const auto limit = normalized(wb);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(k.at(50, j), limit[j], 1e-4);
}

TEST(ComputeKeys, RowsAreUnitNorm) {
  Rng rng(43);
  const auto x = random_matrix(rng, 40, 8), w = random_matrix(rng, 4, 8);
  Tape<float> tape;
  const auto k = tape.value(compute_keys(tape, tape.constant(x.cast<float>()), tape.constant(w.cast<float>()),
                                          tape.constant(Tensor<float>::scalar(0.9f))));
  for (std::size_t t = 0; t < 40; ++t) {
    double n = 0.0;
    for (float v : k.row(t)) n += static_cast<double>(v) * v;
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
  }
}

TEST(ComputeValues, LookAheadAndBoundary) {
  Rng rng(44);
  const double lam = 0.3;
  const auto x = random_matrix(rng, 5, 4), w = random_matrix(rng, 3, 4);
  Tape<double> tape;
  const auto v = tape.value(compute_values(tape, tape.constant(x), tape.constant(w), tape.constant(TensorD::scalar(lam))));
  const auto v0 =
      tape.value(compute_values(tape, tape.constant(x), tape.constant(w), tape.constant(TensorD::scalar(0.0))));
  for (std::size_t t = 0; t < 5; ++t) {
    auto mixed = mat_vec(w, x.row(t));
    if (t + 1 < 5) {
      const auto next = mat_vec(w, x.row(t + 1));
      for (std::size_t j = 0; j < 3; ++j) mixed[j] += lam * next[j];
    }
    const auto expect = normalized(mixed);
    const auto plain = normalized(mat_vec(w, x.row(t)));
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_NEAR(v.at(t, j), expect[j], 1e-14);
      EXPECT_NEAR(v0.at(t, j), plain[j], 1e-14);
    }
  }
  for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(v.at(4, j), v0.at(4, j));
}

TEST(ContextualForward, FirstPositionIsZeroAndSecondCopiesFirstValue) {
  Rng rng(45);
  for (const auto& spec : model_transforms()) {
    Tape<double> tape;
    const auto keys = tape.value(ad::row_l2_normalize(tape, tape.constant(random_matrix(rng, 2, 4))));
    const auto values = random_matrix(rng, 2, 3);
    const auto out = tape.value(contextual_forward(tape, tape.constant(keys), tape.constant(values), spec));
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_EQ(out.at(0, j), 0.0) << to_string(spec.kind);
      EXPECT_NEAR(out.at(1, j), values.at(0, j), 1e-15) << to_string(spec.kind);
    }
  }
}

TEST(ContextualForward, StrictlyCausalUnderPerturbation) {
  Rng rng(46);
  for (const auto& spec : model_transforms()) {
    Tape<double> tape;
    auto keys = tape.value(ad::row_l2_normalize(tape, tape.constant(random_matrix(rng, 8, 4))));
    auto values = random_matrix(rng, 8, 3);
    const auto base = tape.value(contextual_forward(tape, tape.constant(keys), tape.constant(values), spec));
    for (std::size_t j = 0; j < 8; ++j) {
      auto pv = values;
      for (std::size_t c = 0; c < 3; ++c) pv.at(j, c) += 0.5;
      const auto out = tape.value(contextual_forward(tape, tape.constant(keys), tape.constant(pv), spec));
      for (std::size_t t = 0; t <= j; ++t)
        for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(out.at(t, c), base.at(t, c)) << to_string(spec.kind);
      auto pk = keys;
      for (std::size_t c = 0; c < 4; ++c) pk.at(j, c) = -pk.at(j, c);
      const auto outk = tape.value(contextual_forward(tape, tape.constant(pk), tape.constant(values), spec));
      for (std::size_t t = 0; t < j; ++t)
        for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(outk.at(t, c), base.at(t, c)) << to_string(spec.kind);
    }
  }
}

TEST(PersistentForward, SingleSlotAndZeroSlots) {
  Rng rng(47);
  for (const auto& spec : model_transforms()) {
    Tape<double> tape;
    const auto keys = tape.value(ad::row_l2_normalize(tape, tape.constant(random_matrix(rng, 5, 4))));
    const auto one_key = random_matrix(rng, 1, 4), one_value = random_matrix(rng, 1, 3);
    const auto out = tape.value(
        persistent_forward(tape, tape.constant(keys), tape.constant(one_key), tape.constant(one_value), spec));
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out.at(t, j), one_value.at(0, j), 1e-15);
    const auto zero = tape.value(persistent_forward(tape, tape.constant(keys), tape.constant(random_matrix(rng, 6, 4)),
                                                     tape.constant(TensorD::matrix(6, 3)), spec));
    for (double x : zero.data) EXPECT_EQ(x, 0.0);
  }
}

TEST(PersistentForward, GradientMatchesFiniteDifferences) {
  Rng rng(48);
  const TransformSpec spec{TransformKind::Sparsemax, 2.0, 1, 1.0, 0.5};
  std::vector<TensorD> ps{random_matrix(rng, 5, 4), random_matrix(rng, 6, 4), random_matrix(rng, 6, 3)};
  const auto weights = random_matrix(rng, 5, 3);
  auto build = [&](Tape<double>& t, const std::vector<Var>& v) {
    const Var out = persistent_forward(t, ad::row_l2_normalize(t, v[0]), v[1], v[2], spec);
    return ad::sum(t, ad::hadamard(t, out, t.constant(weights)));
  };
  auto loss = [&](std::vector<TensorD>& p, std::uint64_t& sig) {
    Tape<double> t(false);
    std::vector<Var> v;
    for (auto& x : p) v.push_back(t.parameter(x));
    const double f = t.value(build(t, v)).data[0];
    sig = t.support_signature;
    return f;
  };
  Tape<double> t;
  std::vector<Var> v;
  for (auto& x : ps) v.push_back(t.parameter(x));
  t.backward(build(t, v));
  std::vector<TensorD> grads;
  for (Var x : v) grads.push_back(t.grad(x));
  const auto r = grad_check(loss, ps, grads, 1e-6, 100, 3);
  EXPECT_GT(r.checked, 50u);
  EXPECT_LE(r.max_rel_error, 1e-3);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

TEST(MosaicModel, ParameterLayout) {
  const MosaicModel<float> m(small_config({}));
  const auto& cfg = m.config();
  const std::size_t d = cfg.head_dim();
  std::size_t expect = 2 * cfg.vocab * cfg.d_model;
  expect += cfg.depth * (2 * cfg.d_model * cfg.d_model + cfg.heads * (2 * d * cfg.d_model + 2 + 2 * cfg.persistent_slots * d));
  EXPECT_EQ(m.parameter_count(), expect);
  for (std::size_t i = 1; i < m.params().size(); ++i) EXPECT_LT(m.params()[i - 1].name, m.params()[i].name);
  EXPECT_FLOAT_EQ(m.param("layers.1.heads.0.lambda_phi").data[0], 0.5f);
  EXPECT_FALSE(m.params()[m.index_of("layers.0.heads.1.lambda_psi")].decay);
  const float bound = 1.0f / std::sqrt(16.0f);
  for (float x : m.param("embed").data) EXPECT_LE(std::abs(x), bound);
  EXPECT_THROW(m.index_of("nope"), Error);
}

TEST(MosaicModel, InitializationIsSeeded) {
  auto cfg = small_config({});
  const MosaicModel<float> a(cfg), b(cfg);
  cfg.seed = 6;
  const MosaicModel<float> c(cfg);
  EXPECT_EQ(a.param("embed").data, b.param("embed").data);
  EXPECT_NE(a.param("embed").data, c.param("embed").data);
  EXPECT_NE(a.param("layers.0.w_ctx").data, a.param("layers.1.w_ctx").data);
}

TEST(ModelForward, ShapesAndLengths) {
  Rng rng(49);
  for (const auto& spec : model_transforms()) {
    const MosaicModel<float> m(small_config(spec));
    const auto tokens = random_tokens(rng, 12, 36);
    EXPECT_EQ(model_logits(m, std::span<const std::uint32_t>(tokens)).shape, (std::vector<std::size_t>{12, 36}));
    const auto longer = random_tokens(rng, 2 * m.config().seq_len, 36);
    EXPECT_EQ(model_logits(m, std::span<const std::uint32_t>(longer)).rows(), longer.size());
    const std::vector<std::uint32_t> one{3};
    EXPECT_EQ(model_logits(m, std::span<const std::uint32_t>(one)).rows(), 1u);
  }
}

TEST(ModelForward, DepthZeroIsBigram) {
  const MosaicModel<double> m(small_config({}, 0));
  const std::vector<std::uint32_t> tokens{4, 9, 4};
  const auto logits = model_logits(m, std::span<const std::uint32_t>(tokens));
  const auto& e = m.param("embed");
  const auto& u = m.param("unembed");
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t v = 0; v < 36; ++v) {
      double s = 0.0;
      for (std::size_t j = 0; j < 16; ++j) s += e.at(tokens[t], j) * u.at(j, v);
      EXPECT_NEAR(logits.at(t, v), s, 1e-14);
    }
  for (std::size_t v = 0; v < 36; ++v) EXPECT_EQ(logits.at(0, v), logits.at(2, v));
}

TEST(ModelForward, InvalidToken) {
  const MosaicModel<float> m(small_config({}));
  const std::vector<std::uint32_t> tokens{1, 36};
  try {
    model_logits(m, std::span<const std::uint32_t>(tokens));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidToken);
  }
}

TEST(ModelForward, CausalByPerturbation) {
  Rng rng(50);
  for (const auto& spec : model_transforms()) {
    const MosaicModel<float> m(small_config(spec));
    const auto tokens = random_tokens(rng, 10, 36);
    const auto base = model_logits(m, std::span<const std::uint32_t>(tokens));
    for (std::size_t j = 0; j < 10; ++j) {
      auto p = tokens;
      p[j] = (p[j] + 1) % 36;
      const auto out = model_logits(m, std::span<const std::uint32_t>(p));
      for (std::size_t t = 0; t < j; ++t)
        for (std::size_t v = 0; v < 36; ++v) ASSERT_EQ(out.at(t, v), base.at(t, v)) << to_string(spec.kind);
      bool changed = false;
      for (std::size_t v = 0; v < 36; ++v) changed = changed || out.at(j, v) != base.at(j, v);
      EXPECT_TRUE(changed);
    }
  }
}

TEST(ModelForward, TrailingPadDoesNotChangeEarlierLogits) {
  Rng rng(51);
  for (const auto& spec : model_transforms()) {
    const MosaicModel<float> m(small_config(spec));
    auto tokens = random_tokens(rng, 9, 35);
    const auto base = model_logits(m, std::span<const std::uint32_t>(tokens));
    tokens.insert(tokens.end(), 5, tokens::kSeqPad);
    const auto padded = model_logits(m, std::span<const std::uint32_t>(tokens));
    for (std::size_t t = 0; t < 9; ++t)
      for (std::size_t v = 0; v < 36; ++v) ASSERT_EQ(padded.at(t, v), base.at(t, v)) << to_string(spec.kind);
  }
}

// Unit keys and values make every contextual position a Nadaraya-Watson
// problem; the rectified-polynomial side is rebuilt from the traced activations.
TEST(ModelForward, ContextualOutputIsKernelRegression) {
  Rng rng(52);
  for (double alpha : {2.0, 1.5}) {
    TransformSpec spec{alpha == 2.0 ? TransformKind::Sparsemax : TransformKind::Entmax, alpha};
    auto cfg = small_config(spec, 2, 32);
    cfg.gamma = 0.5;
    const MosaicModel<float> m(cfg);
    const auto tokens = random_tokens(rng, 24, 36);
    ForwardTrace<float> trace;
    model_logits(m, std::span<const std::uint32_t>(tokens), &trace);
    double worst = 0.0;
    for (const auto& layer : trace.layers) {
      for (const auto& head : layer) {
        const std::size_t d = head.keys.cols();
        for (std::size_t t = 1; t < tokens.size(); ++t) {
          Matrix keys(t, d), values(t, head.values.cols());
          for (std::size_t i = 0; i < t; ++i) {
            for (std::size_t j = 0; j < d; ++j) keys(i, j) = head.keys.at(i, j);
            for (std::size_t j = 0; j < values.cols; ++j) values(i, j) = head.values.at(i, j);
          }
          std::vector<double> q(d);
          for (std::size_t j = 0; j < d; ++j) q[j] = head.keys.at(t, j);
          const KeyValueCache cache(keys, values, q);
          const auto p = entmax(cache.scores(), alpha, 0.5);
          const int r = entmax_kernel_order(alpha);
          const double h = recover_bandwidth(*p.threshold, 0.5, r);
          const auto nw = nadaraya_watson(cache, KernelSpec::rect_poly(r, h));
          for (std::size_t j = 0; j < nw.size(); ++j)
            worst = std::max(worst, std::abs(nw[j] - static_cast<double>(head.contextual.at(t, j))));
        }
      }
    }
    EXPECT_LE(worst, 1e-6) << alpha;
  }
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

struct Batch {
  std::vector<TaskSample> samples;
  std::vector<Example> examples() const {
    std::vector<Example> out;
    for (const auto& s : samples) out.push_back({s.input, s.target, s.mask});
    return out;
  }
};

Batch sort_batch(std::size_t n, std::size_t base_len, std::uint64_t seed) {
  TaskSpec spec;
  spec.kind = TaskKind::Sort;
  spec.base_len = base_len;
  spec.seed = seed;
  spec.count = n;
  return {generate(spec)};
}

double batch_loss(const MosaicModel<double>& model, std::span<const Example> batch, std::uint64_t& sig) {
  std::size_t masked = 0;
  for (const auto& ex : batch)
    for (auto m : ex.mask) masked += m;
  double total = 0.0;
  sig = 0;
  for (const auto& ex : batch) {
    Tape<double> tape(false);
    const auto params = bind_parameters(tape, model);
    const Var logits = model_forward(tape, model, params, ex.input);
    total += tape.value(ad::masked_cross_entropy(tape, logits, ex.target, ex.mask, static_cast<double>(masked))).data[0];
    sig = (sig ^ tape.support_signature) * 0x100000001B3ULL;
  }
  return total;
}

GradCheckResult model_grad_check(const TransformSpec& spec, std::uint64_t seed) {
  auto cfg = small_config(spec, 1, 16);
  cfg.seed = seed;
  MosaicModel<double> model(cfg);
  const auto data = sort_batch(3, 4, seed);
  const auto batch = data.examples();
  const auto g = batch_gradient(model, std::span<const Example>(batch), 1);
  std::vector<TensorD> params;
  for (const auto& p : model.params()) params.push_back(p.value);
  auto loss = [&](std::vector<TensorD>& ps, std::uint64_t& sig) {
    for (std::size_t i = 0; i < ps.size(); ++i) model.params()[i].value = ps[i];
    return batch_loss(model, batch, sig);
  };
  auto r = grad_check(loss, params, g.grads, 1e-5, 200, seed);
  return r;
}

TEST(ModelGradient, MatchesFiniteDifferences) {
  for (const auto& spec : model_transforms()) {
    const auto r = model_grad_check(spec, 9);
    const double tol = spec.kind == TransformKind::Softmax ? 1e-4 : 1e-3;
    EXPECT_LE(r.max_rel_error, tol) << to_string(spec.kind);
    EXPECT_GE(r.checked, 100u) << to_string(spec.kind);
  }
}

TEST(ModelGradient, BatchLossMatchesTape) {
  MosaicModel<double> model(small_config({TransformKind::Sparsemax, 2.0}, 1, 16));
  const auto data = sort_batch(4, 5, 3);
  const auto batch = data.examples();
  std::uint64_t sig = 0;
  const auto g = batch_gradient(model, std::span<const Example>(batch), 1);
  EXPECT_NEAR(batch_loss(model, batch, sig), g.loss, 1e-12);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

TEST(LearningRate, WarmupThenCosine) {
  OptimizerConfig opt;
  opt.lr = 1e-3;
  opt.min_lr = 1e-4;
  opt.warmup_iters = 10;
  opt.max_iters = 110;
  EXPECT_DOUBLE_EQ(learning_rate(opt, 0), 1e-4);
  EXPECT_DOUBLE_EQ(learning_rate(opt, 9), 1e-3);
  EXPECT_DOUBLE_EQ(learning_rate(opt, 10), 1e-3);
  EXPECT_NEAR(learning_rate(opt, 60), 5.5e-4, 1e-15);
  EXPECT_DOUBLE_EQ(learning_rate(opt, 110), 1e-4);
  EXPECT_DOUBLE_EQ(learning_rate(opt, 500), 1e-4);
  for (std::size_t i = 10; i < 110; ++i) EXPECT_GE(learning_rate(opt, i), learning_rate(opt, i + 1));
}

TEST(Training, InitialLossNearLogV) {
  for (const auto& spec : model_transforms()) {
    auto cfg = small_config(spec);
    cfg.d_model = 64;
    cfg.heads = 4;
    MosaicModel<float> model(cfg);
    const auto data = sort_batch(16, 16, 1);
    const auto batch = data.examples();
    const auto g = batch_gradient(model, std::span<const Example>(batch), 1);
    EXPECT_NEAR(g.loss, std::log(36.0), 0.1 * std::log(36.0)) << to_string(spec.kind);
  }
}

std::vector<double> loss_trace(const MosaicConfig& cfg, std::size_t steps, std::size_t threads,
                               MosaicModel<float>* out = nullptr) {
  MosaicModel<float> model(cfg);
  Trainer<float> trainer(model, threads);
  const auto data = sort_batch(40, 6, 2);
  const auto all = data.examples();
  std::vector<double> trace;
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t start = (s * 8) % 40;
    trace.push_back(trainer.step(std::span<const Example>(all).subspan(start, 8)).loss);
  }
  if (out) *out = model;
  return trace;
}

TEST(Training, DeterministicAcrossRunsAndThreads) {
  const auto cfg = small_config({TransformKind::Sparsemax, 2.0});
  MosaicModel<float> m1, m3;
  const auto a = loss_trace(cfg, 100, 1, &m1);
  const auto b = loss_trace(cfg, 100, 1);
  const auto c = loss_trace(cfg, 100, 3, &m3);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
  EXPECT_EQ(serialize_checkpoint(m1), serialize_checkpoint(m3));
  EXPECT_LT(a.back(), a.front());
}

TEST(Training, OverfitsFixedBatch) {
  for (const auto& spec : {TransformSpec{TransformKind::Softmax}, TransformSpec{TransformKind::Sparsemax, 2.0}}) {
    MosaicConfig cfg;
    cfg.transform = spec;
    cfg.optimizer.lr = 3e-3;
    cfg.optimizer.min_lr = 3e-3;
    cfg.optimizer.warmup_iters = 10;
    cfg.optimizer.weight_decay = 0.0;
    cfg.optimizer.max_iters = 200;
    MosaicModel<float> model(cfg);
    Trainer<float> trainer(model);
    const auto data = sort_batch(32, 8, 3);
    const auto batch = data.examples();
    double loss = 0.0;
    for (int s = 0; s < 200; ++s) loss = trainer.step(batch).loss;
    EXPECT_LT(loss, 0.05) << to_string(spec.kind);
  }
}

TEST(Training, NonFiniteLossAborts) {
  auto cfg = small_config({});
  MosaicModel<float> model(cfg);
  model.param("unembed").data[0] = std::nanf("");
  Trainer<float> trainer(model, 1);
  const auto data = sort_batch(2, 3, 1);
  const auto batch = data.examples();
  try {
    trainer.step(batch);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NumericalError);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

TEST(Checkpoint, RoundTrip) {
  auto cfg = small_config({TransformKind::TopKSoftmax, 1.5, 2});
  cfg.gamma = 0.3;
  MosaicModel<float> model(cfg);
  model.param("embed").data[3] = -0.0f;
  model.param("embed").data[4] = 1e-38f;
  const std::string bytes = serialize_checkpoint(model);
  EXPECT_EQ(bytes.substr(0, 4), "SKAM");
  const auto back = deserialize_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  EXPECT_EQ(nlohmann::json(back.config()), nlohmann::json(cfg));
  ASSERT_EQ(back.params().size(), model.params().size());
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    EXPECT_EQ(back.params()[i].name, model.params()[i].name);
    EXPECT_EQ(back.params()[i].decay, model.params()[i].decay);
    EXPECT_EQ(std::memcmp(back.params()[i].value.data.data(), model.params()[i].value.data.data(),
                          model.params()[i].value.numel() * sizeof(float)),
              0);
  }
  Rng rng(53);
  const auto tokens = random_tokens(rng, 11, 36);
  EXPECT_EQ(model_logits(back, std::span<const std::uint32_t>(tokens)).data,
            model_logits(model, std::span<const std::uint32_t>(tokens)).data);
}

TEST(Checkpoint, Layout) {
  MosaicConfig cfg = small_config({}, 0, 4);
  cfg.heads = 1;
  cfg.vocab = 3;
  const MosaicModel<float> model(cfg);
  const std::string bytes = serialize_checkpoint(model);
  auto u32 = [&](std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
    return v;
  };
  EXPECT_EQ(u32(4), 1u);
  const std::uint32_t json_len = u32(8);
  std::size_t at = 12 + json_len;
  EXPECT_EQ(static_cast<unsigned char>(bytes[at]), 5u);  // "embed"
  EXPECT_EQ(bytes.substr(at + 2, 5), "embed");
  EXPECT_EQ(static_cast<unsigned char>(bytes[at + 7]), 2u);
  EXPECT_EQ(u32(at + 8), 3u);
  EXPECT_EQ(u32(at + 12), 4u);
  float first;
  const std::uint32_t bits = u32(at + 16);
  std::memcpy(&first, &bits, 4);
  EXPECT_EQ(first, model.param("embed").data[0]);
  EXPECT_EQ(bytes.size(), 12 + json_len + 2 * (2 + 7 + 1 + 8) + 2 * 12 * 4 - 2);
}

TEST(Checkpoint, CorruptInputs) {
  const MosaicModel<float> model(small_config({}));
  const std::string bytes = serialize_checkpoint(model);
  auto expect_checkpoint_error = [](std::string b) {
    try {
      deserialize_checkpoint(std::move(b));
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::CheckpointError);
    }
  };
  expect_checkpoint_error("SKAN" + bytes.substr(4));
  expect_checkpoint_error(bytes.substr(0, bytes.size() - 3));
  expect_checkpoint_error(bytes.substr(0, 2));
  std::string bad_version = bytes;
  bad_version[4] = 2;
  expect_checkpoint_error(bad_version);
  expect_checkpoint_error(bytes + "x");
  try {
    load_checkpoint("/nonexistent/skam.bin");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::CheckpointError);
  }
}

}  // namespace
}  // namespace skam
