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

// Memory Mosaics: stacked blocks of contextual associative memories (leaky
// averaged keys, one-step look-ahead values, diagonal-excluded kernel
// regression) running in parallel with persistent memory slots.
//
// Block: x <- x + W_ctx concat_h(contextual_h) + W_pers concat_h(persistent_h).
// There is no positional encoding; order enters only through the leaky key
// accumulator.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <fstream>
#include <iterator>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"
#include "skam/autodiff.hpp"
#include "skam/common.hpp"
#include "skam/rng.hpp"
#include "skam/transforms.hpp"

namespace skam {

struct OptimizerConfig {
  double lr = 1e-3;
  double min_lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  std::size_t warmup_iters = 100;
  std::size_t max_iters = 2000;
};

struct MosaicConfig {
  std::size_t depth = 2;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t vocab = 36;
  std::size_t seq_len = 64;  // training length; the model itself is length-agnostic
  std::size_t persistent_slots = 32;
  TransformSpec transform{TransformKind::Softmax};
  std::optional<double> gamma;  // unset: 1/sqrt(head_dim) for the softmax kinds, 1 otherwise
  double lambda_init = 0.5;     // raw (pre-sigmoid) value of every leaky coefficient
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;

  std::size_t head_dim() const { return d_model / heads; }

  double effective_gamma() const {
    if (gamma) return *gamma;
    if (transform.kind == TransformKind::Softmax || transform.kind == TransformKind::TopKSoftmax)
      return 1.0 / std::sqrt(static_cast<double>(head_dim()));
    return 1.0;
  }

  /// Transform spec with the effective temperature filled in.
  TransformSpec attention() const {
    TransformSpec s = transform;
    s.gamma = effective_gamma();
    return s;
  }

  void validate() const {
    require(heads >= 1 && d_model >= 1 && d_model % heads == 0, ErrorCode::ConfigError,
            "d_model must be a positive multiple of heads");
    require(vocab >= 1, ErrorCode::ConfigError, "vocab must be >= 1");
    require(seq_len >= 2, ErrorCode::ConfigError, "seq_len must be >= 2");
    require(persistent_slots >= 1, ErrorCode::ConfigError, "persistent_slots must be >= 1");
    require(lambda_init >= 0.0 && lambda_init < 1.0, ErrorCode::ConfigError, "lambda_init must lie in [0, 1)");
    require(optimizer.lr > 0.0 && optimizer.min_lr >= 0.0 && optimizer.grad_clip > 0.0, ErrorCode::ConfigError,
            "learning rates and grad_clip must be positive");
    attention().validate();
  }
};

inline void to_json(nlohmann::json& j, const TransformSpec& s) {
  j = {{"kind", std::string(to_string(s.kind))}, {"alpha", s.alpha}, {"k", s.k}, {"b", s.b}};
}

inline void from_json(const nlohmann::json& j, TransformSpec& s) {
  s.kind = parse_transform_kind(j.at("kind").get<std::string>());
  s.alpha = j.value("alpha", 1.5);
  s.k = j.value("k", std::size_t{1});
  s.b = j.value("b", 1.0);
}

inline void to_json(nlohmann::json& j, const OptimizerConfig& o) {
  j = {{"lr", o.lr},
       {"min_lr", o.min_lr},
       {"betas", {o.beta1, o.beta2}},
       {"eps", o.eps},
       {"weight_decay", o.weight_decay},
       {"grad_clip", o.grad_clip},
       {"warmup_iters", o.warmup_iters},
       {"max_iters", o.max_iters}};
}

inline void from_json(const nlohmann::json& j, OptimizerConfig& o) {
  const OptimizerConfig d;
  o.lr = j.value("lr", d.lr);
  o.min_lr = j.value("min_lr", d.min_lr);
  if (j.contains("betas")) {
    o.beta1 = j.at("betas").at(0).get<double>();
    o.beta2 = j.at("betas").at(1).get<double>();
  }
  o.eps = j.value("eps", d.eps);
  o.weight_decay = j.value("weight_decay", d.weight_decay);
  o.grad_clip = j.value("grad_clip", d.grad_clip);
  o.warmup_iters = j.value("warmup_iters", d.warmup_iters);
  o.max_iters = j.value("max_iters", d.max_iters);
}

inline void to_json(nlohmann::json& j, const MosaicConfig& c) {
  j = {{"depth", c.depth},
       {"d_model", c.d_model},
       {"heads", c.heads},
       {"vocab", c.vocab},
       {"seq_len", c.seq_len},
       {"persistent_slots", c.persistent_slots},
       {"transform", c.transform},
       {"gamma", c.gamma ? nlohmann::json(*c.gamma) : nlohmann::json(nullptr)},
       {"lambda_init", c.lambda_init},
       {"optimizer", c.optimizer},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, MosaicConfig& c) {
  const MosaicConfig d;
  c.depth = j.value("depth", d.depth);
  c.d_model = j.value("d_model", d.d_model);
  c.heads = j.value("heads", d.heads);
  c.vocab = j.value("vocab", d.vocab);
  c.seq_len = j.value("seq_len", d.seq_len);
  c.persistent_slots = j.value("persistent_slots", d.persistent_slots);
  if (j.contains("transform")) c.transform = j.at("transform").get<TransformSpec>();
  c.gamma = j.contains("gamma") && !j.at("gamma").is_null() ? std::optional<double>(j.at("gamma").get<double>())
                                                               : std::nullopt;
  c.lambda_init = j.value("lambda_init", d.lambda_init);
  if (j.contains("optimizer")) c.optimizer = j.at("optimizer").get<OptimizerConfig>();
  c.seed = j.value("seed", d.seed);
}

namespace names {

inline std::string head(std::size_t layer, std::size_t h, std::string_view leaf) {
  return "layers." + std::to_string(layer) + ".heads." + std::to_string(h) + "." + std::string(leaf);
}
inline std::string layer(std::size_t layer, std::string_view leaf) {
  return "layers." + std::to_string(layer) + "." + std::string(leaf);
}

}  // namespace names

/// All trainable tensors of a model, kept in canonical (lexicographic name) order.
template <typename T>
class MosaicModel {
 public:
  struct Param {
    std::string name;
    Tensor<T> value;
    bool decay = true;  // weight decay applies to matrices, not to the leaky coefficients
  };

  struct HeadIndex {
    std::size_t w_phi, w_psi, lambda_phi, lambda_psi, slot_keys, slot_values;
  };
  struct LayerIndex {
    std::vector<HeadIndex> heads;
    std::size_t w_ctx, w_pers;
  };

  MosaicModel() = default;

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization, one stream per parameter name.
  explicit MosaicModel(const MosaicConfig& config) : config_(config) {
    config_.validate();
    const std::size_t dm = config_.d_model, d = config_.head_dim(), m = config_.persistent_slots;
    auto uniform = [&](const std::string& name, std::size_t r, std::size_t c, std::size_t fan_in) {
      Param p{name, Tensor<T>::matrix(r, c), true};
      Rng rng(derive_seed(config_.seed, hash_name(name)));
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (T& x : p.value.data) x = static_cast<T>(rng.uniform(-bound, bound));
      params_.push_back(std::move(p));
    };
    auto scalar = [&](const std::string& name) {
      params_.push_back({name, Tensor<T>::scalar(static_cast<T>(config_.lambda_init)), false});
    };
    uniform("embed", config_.vocab, dm, dm);
    uniform("unembed", dm, config_.vocab, dm);
    for (std::size_t l = 0; l < config_.depth; ++l) {
      uniform(names::layer(l, "w_ctx"), dm, dm, dm);
      uniform(names::layer(l, "w_pers"), dm, dm, dm);
      for (std::size_t h = 0; h < config_.heads; ++h) {
        uniform(names::head(l, h, "w_phi"), d, dm, dm);
        uniform(names::head(l, h, "w_psi"), d, dm, dm);
        scalar(names::head(l, h, "lambda_phi"));
        scalar(names::head(l, h, "lambda_psi"));
        uniform(names::head(l, h, "slot_keys"), m, d, d);
        uniform(names::head(l, h, "slot_values"), m, d, d);
      }
    }
    finalize();
  }

  const MosaicConfig& config() const { return config_; }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  std::size_t embed_index() const { return embed_; }
  std::size_t unembed_index() const { return unembed_; }
  const std::vector<LayerIndex>& layers() const { return layers_; }

  std::size_t index_of(std::string_view name) const {
    auto it = std::lower_bound(params_.begin(), params_.end(), name,
                               [](const Param& p, std::string_view n) { return p.name < n; });
    require(it != params_.end() && it->name == name, ErrorCode::CheckpointError,
            "no parameter named '" + std::string(name) + "'");
    return static_cast<std::size_t>(it - params_.begin());
  }
  Tensor<T>& param(std::string_view name) { return params_[index_of(name)].value; }
  const Tensor<T>& param(std::string_view name) const { return params_[index_of(name)].value; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  template <typename U>
  MosaicModel<U> cast() const {
    MosaicModel<U> out;
    out.config_ = config_;
    for (const auto& p : params_) out.params_.push_back({p.name, p.value.template cast<U>(), p.decay});
    out.finalize();
    return out;
  }

  /// Builds a model from named tensors (checkpoint loading).
  static MosaicModel from_params(const MosaicConfig& config, std::vector<Param> params) {
    MosaicModel reference(config);
    MosaicModel out;
    out.config_ = config;
    out.params_ = std::move(params);
    std::sort(out.params_.begin(), out.params_.end(), [](const Param& a, const Param& b) { return a.name < b.name; });
    require(out.params_.size() == reference.params_.size(), ErrorCode::CheckpointError,
            "parameter count does not match the configuration");
    for (std::size_t i = 0; i < out.params_.size(); ++i) {
      require(out.params_[i].name == reference.params_[i].name, ErrorCode::CheckpointError,
              "unexpected parameter '" + out.params_[i].name + "'");
      require(out.params_[i].value.shape == reference.params_[i].value.shape, ErrorCode::CheckpointError,
              "shape mismatch for '" + out.params_[i].name + "'");
      out.params_[i].decay = reference.params_[i].decay;
    }
    out.finalize();
    return out;
  }

 private:
  template <typename U>
  friend class MosaicModel;

  void finalize() {
    std::sort(params_.begin(), params_.end(), [](const Param& a, const Param& b) { return a.name < b.name; });
    embed_ = index_of("embed");
    unembed_ = index_of("unembed");
    layers_.assign(config_.depth, {});
    for (std::size_t l = 0; l < config_.depth; ++l) {
      layers_[l].w_ctx = index_of(names::layer(l, "w_ctx"));
      layers_[l].w_pers = index_of(names::layer(l, "w_pers"));
      for (std::size_t h = 0; h < config_.heads; ++h) {
        layers_[l].heads.push_back({index_of(names::head(l, h, "w_phi")), index_of(names::head(l, h, "w_psi")),
                                    index_of(names::head(l, h, "lambda_phi")),
                                    index_of(names::head(l, h, "lambda_psi")),
                                    index_of(names::head(l, h, "slot_keys")),
                                    index_of(names::head(l, h, "slot_values"))});
      }
    }
  }

  MosaicConfig config_;
  std::vector<Param> params_;
  std::size_t embed_ = 0, unembed_ = 0;
  std::vector<LayerIndex> layers_;
};

// ---------------------------------------------------------------------------
// Memory units
// ---------------------------------------------------------------------------

/// k_t = Norm(kbar_t), kbar_t = W_phi x_t + lambda kbar_{t-1}, kbar_0 = 0.
template <typename T>
Var compute_keys(Tape<T>& tape, Var x, Var w_phi, Var lambda) {
  const Var projected = ad::matmul_nt(tape, x, w_phi);
  return ad::row_l2_normalize(tape, ad::leaky_accumulate(tape, projected, lambda));
}

/// v_t = Norm(W_psi x_t + lambda W_psi x_{t+1}); the step past the end contributes zero.
template <typename T>
Var compute_values(Tape<T>& tape, Var x, Var w_psi, Var lambda) {
  const Var projected = ad::matmul_nt(tape, x, w_psi);
  return ad::row_l2_normalize(tape, ad::lookahead(tape, projected, lambda));
}

/// Position t attends over positions [0, t) with scores k_i . k_t. Position 0
/// has an empty context and outputs zeros.
template <typename T>
Var contextual_forward(Tape<T>& tape, Var keys, Var values, const TransformSpec& spec) {
  const Var scores = ad::matmul_nt(tape, keys, keys);
  const Var weights = ad::transform_apply(tape, scores, spec, MaskMode::StrictlyCausal);
  return ad::matmul(tape, weights, values);
}

/// Every position attends over all slots with scores Norm(slot_key) . k_t.
template <typename T>
Var persistent_forward(Tape<T>& tape, Var keys, Var slot_keys, Var slot_values, const TransformSpec& spec) {
  const Var scores = ad::matmul_nt(tape, keys, ad::row_l2_normalize(tape, slot_keys));
  const Var weights = ad::transform_apply(tape, scores, spec, MaskMode::Full);
  return ad::matmul(tape, weights, slot_values);
}

/// Intermediate activations captured by `model_forward` for inspection.
template <typename T>
struct ForwardTrace {
  struct Head {
    Tensor<T> keys, values, contextual;
  };
  std::vector<std::vector<Head>> layers;
};

/// Binds every parameter of `model` to `tape`, in canonical order.
template <typename T>
std::vector<Var> bind_parameters(Tape<T>& tape, const MosaicModel<T>& model) {
  std::vector<Var> vars;
  vars.reserve(model.params().size());
  for (const auto& p : model.params()) vars.push_back(tape.parameter(p.value));
  return vars;
}

/// Token ids -> logits (T x V).
template <typename T>
Var model_forward(Tape<T>& tape, const MosaicModel<T>& model, const std::vector<Var>& params,
                  std::span<const std::uint32_t> tokens, ForwardTrace<T>* trace = nullptr) {
  require(!tokens.empty(), ErrorCode::ShapeError, "model_forward: empty token sequence");
  const auto& cfg = model.config();
  const TransformSpec spec = cfg.attention();
  Var x = ad::embedding_lookup(tape, params[model.embed_index()], tokens);
  if (trace) trace->layers.assign(cfg.depth, {});
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const auto& layer = model.layers()[l];
    std::vector<Var> ctx, pers;
    for (const auto& h : layer.heads) {
      const Var keys = compute_keys(tape, x, params[h.w_phi], ad::sigmoid(tape, params[h.lambda_phi]));
      const Var values = compute_values(tape, x, params[h.w_psi], ad::sigmoid(tape, params[h.lambda_psi]));
      ctx.push_back(contextual_forward(tape, keys, values, spec));
      pers.push_back(persistent_forward(tape, keys, params[h.slot_keys], params[h.slot_values], spec));
      if (trace) trace->layers[l].push_back({tape.value(keys), tape.value(values), tape.value(ctx.back())});
    }
    const Var ctx_out = ad::matmul_nt(tape, ad::concat_cols(tape, ctx), params[layer.w_ctx]);
    const Var pers_out = ad::matmul_nt(tape, ad::concat_cols(tape, pers), params[layer.w_pers]);
    x = ad::add(tape, x, ad::add(tape, ctx_out, pers_out));
  }
  return ad::matmul(tape, x, params[model.unembed_index()]);
}

/// Logits without recording gradients.
template <typename T>
Tensor<T> model_logits(const MosaicModel<T>& model, std::span<const std::uint32_t> tokens,
                       ForwardTrace<T>* trace = nullptr) {
  Tape<T> tape(false);
  const auto params = bind_parameters(tape, model);
  return tape.value(model_forward(tape, model, params, tokens, trace));
}

/// Greedy next-token prediction at every position (teacher forced).
template <typename T>
std::vector<std::uint32_t> predict_tokens(const MosaicModel<T>& model, std::span<const std::uint32_t> tokens) {
  const auto logits = model_logits(model, tokens);
  std::vector<std::uint32_t> out(logits.rows());
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    const auto row = logits.row(t);
    out[t] = static_cast<std::uint32_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One supervised sequence: predict target[t] from input[0..t], scored where mask[t] = 1.
struct Example {
  std::span<const std::uint32_t> input;
  std::span<const std::uint32_t> target;
  std::span<const std::uint8_t> mask;
};

/// Linear warmup to lr, then cosine decay to min_lr at max_iters.
inline double learning_rate(const OptimizerConfig& opt, std::size_t iter) {
  if (opt.warmup_iters > 0 && iter < opt.warmup_iters)
    return opt.lr * static_cast<double>(iter + 1) / static_cast<double>(opt.warmup_iters);
  if (iter >= opt.max_iters) return opt.min_lr;
  const double span = static_cast<double>(opt.max_iters - opt.warmup_iters);
  const double progress = span > 0 ? static_cast<double>(iter - opt.warmup_iters) / span : 1.0;
  const double coeff = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return opt.min_lr + coeff * (opt.lr - opt.min_lr);
}

struct StepResult {
  double loss = 0.0;
  double token_accuracy = 0.0;  // over masked positions of the batch
  double lr = 0.0;
  double grad_norm = 0.0;       // before clipping
};

/// Worker count from SKAM_THREADS, else the hardware concurrency.
inline std::size_t default_threads() {
  if (const char* env = std::getenv("SKAM_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n) over `threads` workers with a static partition.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < n; i += threads) fn(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Gradient of the batch-mean masked cross-entropy. Per-example gradients are
/// summed in example order, so the result does not depend on `threads`.
template <typename T>
struct BatchGradient {
  double loss = 0.0;
  std::size_t correct = 0;
  std::size_t scored = 0;
  std::vector<Tensor<T>> grads;
  std::uint64_t support_signature = 0;
};

template <typename T>
BatchGradient<T> batch_gradient(const MosaicModel<T>& model, std::span<const Example> batch, std::size_t threads) {
  std::size_t masked = 0;
  for (const auto& ex : batch)
    for (auto m : ex.mask) masked += m ? 1 : 0;
  require(masked > 0, ErrorCode::InvalidLoss, "batch has no masked positions");

  struct PerExample {
    double loss = 0.0;
    std::size_t correct = 0;
    std::uint64_t signature = 0;
    std::vector<Tensor<T>> grads;
  };
  std::vector<PerExample> results(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t i) {
    const Example& ex = batch[i];
    require(ex.input.size() == ex.target.size() && ex.input.size() == ex.mask.size(), ErrorCode::ShapeError,
            "input, target and mask lengths differ");
    auto& out = results[i];
    bool any = false;
    for (auto m : ex.mask) any = any || m;
    Tape<T> tape(true);
    const auto params = bind_parameters(tape, model);
    const Var logits = model_forward(tape, model, params, ex.input);
    const auto& L = tape.value(logits);
    for (std::size_t t = 0; t < L.rows(); ++t) {
      if (!ex.mask[t]) continue;
      const auto row = L.row(t);
      const auto arg = static_cast<std::uint32_t>(std::max_element(row.begin(), row.end()) - row.begin());
      out.correct += arg == ex.target[t] ? 1 : 0;
    }
    out.signature = tape.support_signature;
    out.grads.resize(params.size());
    if (!any) {
      for (std::size_t p = 0; p < params.size(); ++p) out.grads[p] = Tensor<T>(model.params()[p].value.shape);
      return;
    }
    const Var loss = ad::masked_cross_entropy(tape, logits, ex.target, ex.mask, static_cast<double>(masked));
    out.loss = tape.value(loss).data[0];
    tape.backward(loss);
    for (std::size_t p = 0; p < params.size(); ++p) out.grads[p] = tape.grad(params[p]);
  });

  BatchGradient<T> total;
  total.scored = masked;
  total.grads.resize(model.params().size());
  std::uint64_t sig = 0xCBF29CE484222325ULL;
  for (std::size_t p = 0; p < total.grads.size(); ++p) {
    const std::size_t n = model.params()[p].value.numel();
    std::vector<double> acc(n, 0.0);
    for (const auto& r : results)
      for (std::size_t j = 0; j < n; ++j) acc[j] += r.grads[p].data[j];
    total.grads[p] = Tensor<T>(model.params()[p].value.shape);
    for (std::size_t j = 0; j < n; ++j) total.grads[p].data[j] = static_cast<T>(acc[j]);
  }
  for (const auto& r : results) {
    total.loss += r.loss;
    total.correct += r.correct;
    sig = (sig ^ r.signature) * 0x100000001B3ULL;
  }
  total.support_signature = sig;
  return total;
}

/// AdamW (decoupled weight decay) with global-norm clipping and the
/// warmup + cosine schedule.
template <typename T>
class Trainer {
 public:
  Trainer(MosaicModel<T>& model, std::size_t threads = default_threads())
      : model_(model), threads_(threads) {
    for (const auto& p : model_.params()) {
      m_.emplace_back(p.value.numel(), 0.0);
      v_.emplace_back(p.value.numel(), 0.0);
    }
  }

  std::size_t iteration() const { return iter_; }

  StepResult step(std::span<const Example> batch) {
    const auto& opt = model_.config().optimizer;
    auto g = batch_gradient(model_, batch, threads_);
    require(std::isfinite(g.loss), ErrorCode::NumericalError,
            "non-finite loss at iteration " + std::to_string(iter_));

    double sq = 0.0;
    for (const auto& t : g.grads)
      for (T x : t.data) sq += static_cast<double>(x) * x;
    const double norm = std::sqrt(sq);
    require(std::isfinite(norm), ErrorCode::NumericalError,
            "non-finite gradient at iteration " + std::to_string(iter_));
    const double clip = norm > opt.grad_clip ? opt.grad_clip / norm : 1.0;

    const double lr = learning_rate(opt, iter_);
    ++iter_;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(iter_));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(iter_));
    auto& params = model_.params();
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto& w = params[p].value.data;
      auto& m = m_[p];
      auto& v = v_[p];
      const double decay = params[p].decay ? opt.weight_decay : 0.0;
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double grad = g.grads[p].data[j] * clip;
        m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * grad;
        v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * grad * grad;
        const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + opt.eps);
        w[j] = static_cast<T>(w[j] - lr * (update + decay * w[j]));
      }
    }
    return {g.loss, static_cast<double>(g.correct) / static_cast<double>(g.scored), lr, norm};
  }

 private:
  MosaicModel<T>& model_;
  std::size_t threads_;
  std::size_t iter_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
//
// "SKAM" | u32 version (1) | u32 config-JSON length | config JSON |
// per parameter, in canonical name order:
//   u16 name length | name | u8 rank | u32 dims[rank] | f32 data (little endian)

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }
inline void put_u16(std::string& out, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}
  std::uint32_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint32_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    require(pos_ + n <= bytes_.size(), ErrorCode::CheckpointError, "checkpoint truncated");
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const MosaicModel<float>& model) {
  std::string out = "SKAM";
  detail::put_u32(out, kCheckpointVersion);
  const std::string cfg = nlohmann::json(model.config()).dump();
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  for (const auto& p : model.params()) {
    detail::put_u16(out, static_cast<std::uint16_t>(p.name.size()));
    out += p.name;
    detail::put_u8(out, static_cast<std::uint8_t>(p.value.rank()));
    for (std::size_t d : p.value.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float x : p.value.data) {
      std::uint32_t bits;
      std::memcpy(&bits, &x, sizeof bits);
      detail::put_u32(out, bits);
    }
  }
  return out;
}

inline MosaicModel<float> deserialize_checkpoint(std::string bytes) {
  require(bytes.size() >= 4 && bytes.compare(0, 4, "SKAM") == 0, ErrorCode::CheckpointError, "bad checkpoint magic");
  detail::ByteReader in(std::move(bytes));
  in.take(4);
  const std::uint32_t version = in.uint(4);
  require(version == kCheckpointVersion, ErrorCode::CheckpointError,
          "unsupported checkpoint version " + std::to_string(version));
  MosaicConfig config;
  try {
    config = nlohmann::json::parse(in.take(in.uint(4))).get<MosaicConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CheckpointError, std::string("bad config JSON: ") + e.what());
  }
  std::vector<MosaicModel<float>::Param> params;
  while (!in.done()) {
    MosaicModel<float>::Param p;
    p.name = in.take(in.uint(2));
    const std::uint32_t rank = in.uint(1);
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = in.uint(4);
    p.value = Tensor<float>(shape);
    for (float& x : p.value.data) {
      const std::uint32_t bits = in.uint(4);
      std::memcpy(&x, &bits, sizeof x);
    }
    params.push_back(std::move(p));
  }
  return MosaicModel<float>::from_params(config, std::move(params));
}

inline void save_checkpoint(const std::string& path, const MosaicModel<float>& model) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::IoError, "cannot open '" + path + "' for writing");
  const std::string bytes = serialize_checkpoint(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorCode::IoError, "write to '" + path + "' failed");
}

inline MosaicModel<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::CheckpointError, "cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(std::move(bytes));
}

}  // namespace skam
