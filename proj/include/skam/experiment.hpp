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

// Training runs driven by a JSON experiment configuration, and exact-match
// evaluation at training and extrapolated lengths.
//
// Output layout: <output_dir>/seed_<s>/{metrics.jsonl, ckpt_<iter>.bin, final.bin}.
// Training samples are task indices [0, count); evaluation samples at every
// multiplier use indices [count, count + eval_samples).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "skam/mosaic.hpp"
#include "skam/schema.hpp"
#include "skam/tasks.hpp"

namespace skam {

struct TrainingConfig {
  std::size_t iters = 2000;
  std::size_t batch_size = 64;
  std::size_t eval_every = 500;  // 0: evaluate only at the end
  std::size_t eval_samples = 1000;
  std::vector<double> eval_multipliers{1.0};
  std::vector<std::uint64_t> seeds{0};
  std::size_t log_every = 50;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  bool log_elapsed = false;          // wall-clock times make metrics.jsonl run-dependent
};

struct ExperimentConfig {
  MosaicConfig model;
  TaskSpec task;
  TrainingConfig training;
  std::string output_dir;
};

/// Parses and schema-checks a configuration. Unset model fields take task-
/// derived defaults: vocab from the task, seq_len from the training sample
/// length, and max_iters from training.iters.
inline ExperimentConfig parse_experiment(const nlohmann::json& j) {
  const auto errors = validate_experiment_json(j);
  if (!errors.empty()) {
    std::string msg = "configuration does not match the schema:";
    for (const auto& e : errors) msg += "\n  " + e;
    fail(ErrorCode::ConfigError, msg);
  }
  ExperimentConfig c;
  const auto& t = j.at("task");
  c.task.kind = parse_task_kind(t.at("kind").get<std::string>());
  c.task.base_len = t.at("base_len").get<std::size_t>();
  c.task.length_multiplier = t.value("length_multiplier", 1.0);
  c.task.seed = t.value("seed", std::uint64_t{0});
  c.task.count = t.value("count", std::size_t{50000});

  const auto& tr = j.at("training");
  const TrainingConfig d;
  c.training.iters = tr.at("iters").get<std::size_t>();
  c.training.batch_size = tr.at("batch_size").get<std::size_t>();
  c.training.eval_every = tr.value("eval_every", d.eval_every);
  c.training.eval_samples = tr.value("eval_samples", d.eval_samples);
  c.training.eval_multipliers = tr.value("eval_multipliers", d.eval_multipliers);
  c.training.seeds = tr.value("seeds", d.seeds);
  c.training.log_every = tr.value("log_every", d.log_every);
  c.training.checkpoint_every = tr.value("checkpoint_every", d.checkpoint_every);
  c.training.log_elapsed = tr.value("log_elapsed", d.log_elapsed);
  c.output_dir = j.at("output_dir").get<std::string>();

  const nlohmann::json m = j.value("model", nlohmann::json::object());
  c.model = m.get<MosaicConfig>();
  if (!m.contains("vocab")) c.model.vocab = task_vocab(c.task.kind);
  if (!m.contains("seq_len")) c.model.seq_len = generate_sample(c.task, 0).input.size();
  if (!m.contains("optimizer") || !m.at("optimizer").contains("max_iters")) c.model.optimizer.max_iters = c.training.iters;
  require(c.model.vocab >= task_vocab(c.task.kind), ErrorCode::ConfigError, "model vocab smaller than the task vocab");
  c.model.validate();
  for (double mult : c.training.eval_multipliers) {
    TaskSpec probe = c.task;
    probe.length_multiplier = mult;
    try {
      probe.content_length();
    } catch (const Error& e) {
      fail(ErrorCode::ConfigError, std::string("eval multiplier: ") + e.what());
    }
  }
  return c;
}

inline ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::ConfigError, "cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ConfigError, path + ": " + e.what());
  }
  return parse_experiment(j);
}

struct EvalResult {
  double exact_match = 0.0;
  double loss = 0.0;  // mean masked cross-entropy per scored token
};

/// Teacher-forced greedy evaluation.
template <typename T>
EvalResult evaluate(const MosaicModel<T>& model, const std::vector<TaskSample>& samples,
                    std::size_t threads = default_threads()) {
  std::vector<std::vector<std::uint32_t>> predictions(samples.size());
  std::vector<double> losses(samples.size(), 0.0);
  std::vector<std::size_t> counts(samples.size(), 0);
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    const auto& s = samples[i];
    const auto logits = model_logits(model, std::span<const std::uint32_t>(s.input));
    predictions[i].resize(logits.rows());
    for (std::size_t t = 0; t < logits.rows(); ++t) {
      const auto row = logits.row(t);
      predictions[i][t] = static_cast<std::uint32_t>(std::max_element(row.begin(), row.end()) - row.begin());
      if (!s.mask[t]) continue;
      const double m = *std::max_element(row.begin(), row.end());
      double z = 0.0;
      for (T x : row) z += std::exp(static_cast<double>(x) - m);
      losses[i] += m + std::log(z) - static_cast<double>(row[s.target[t]]);
      ++counts[i];
    }
  });
  EvalResult r;
  r.exact_match = exact_match(predictions, samples);
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    total += losses[i];
    n += counts[i];
  }
  r.loss = n > 0 ? total / static_cast<double>(n) : 0.0;
  return r;
}

inline std::vector<TaskSample> eval_samples(const TaskSpec& task, double multiplier, std::size_t first,
                                            std::size_t count) {
  TaskSpec spec = task;
  spec.length_multiplier = multiplier;
  std::vector<TaskSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_sample(spec, first + i));
  return out;
}

inline std::string multiplier_label(double m) {
  nlohmann::json j = m;
  return "eval_x" + j.dump();
}

struct SeedResult {
  std::uint64_t seed = 0;
  std::vector<double> exact_match;  // per eval multiplier, at the final iteration
  double seconds = 0.0;
  std::filesystem::path checkpoint;
};

/// Trains one seed. The model seed is `seed`; the task data are shared by all seeds.
inline SeedResult train_seed(const ExperimentConfig& cfg, std::uint64_t seed, std::ostream& log = std::cerr) {
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };

  const std::filesystem::path dir = std::filesystem::path(cfg.output_dir) / ("seed_" + std::to_string(seed));
  std::filesystem::create_directories(dir);
  std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
  require(static_cast<bool>(metrics), ErrorCode::IoError, "cannot write " + (dir / "metrics.jsonl").string());
  auto emit = [&](std::size_t iter, const std::string& split, double loss, double acc, double lr) {
    nlohmann::ordered_json line = {{"iter", iter}, {"split", split}, {"loss", loss}, {"acc", acc}, {"lr", lr}};
    line["elapsed_s"] = cfg.training.log_elapsed ? nlohmann::ordered_json(elapsed()) : nlohmann::ordered_json(nullptr);
    metrics << line.dump() << '\n';
    metrics.flush();
  };

  MosaicConfig mc = cfg.model;
  mc.seed = seed;
  MosaicModel<float> model(mc);
  Trainer<float> trainer(model);

  const std::vector<TaskSample> train = generate(cfg.task);
  std::vector<std::vector<TaskSample>> evals;
  for (double mult : cfg.training.eval_multipliers)
    evals.push_back(eval_samples(cfg.task, mult, cfg.task.count, cfg.training.eval_samples));

  std::vector<std::size_t> order(train.size());
  std::size_t cursor = order.size();
  std::uint64_t epoch = 0;
  auto next_batch = [&] {
    std::vector<Example> batch;
    while (batch.size() < cfg.training.batch_size) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(derive_seed(seed, 0xDA7AULL), epoch++));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        cursor = 0;
      }
      const auto& s = train[order[cursor++]];
      batch.push_back({s.input, s.target, s.mask});
    }
    return batch;
  };

  SeedResult result;
  result.seed = seed;
  auto run_eval = [&](std::size_t iter, double lr) {
    result.exact_match.clear();
    for (std::size_t m = 0; m < evals.size(); ++m) {
      const auto r = evaluate(model, evals[m]);
      emit(iter, multiplier_label(cfg.training.eval_multipliers[m]), r.loss, r.exact_match, lr);
      result.exact_match.push_back(r.exact_match);
      log << "seed " << seed << " iter " << iter << " " << multiplier_label(cfg.training.eval_multipliers[m])
          << " loss " << r.loss << " exact_match " << r.exact_match << '\n';
    }
  };

  double lr = 0.0;
  for (std::size_t it = 1; it <= cfg.training.iters; ++it) {
    const auto batch = next_batch();
    const StepResult step = trainer.step(batch);
    lr = step.lr;
    if (it % cfg.training.log_every == 0 || it == 1) {
      emit(it, "train", step.loss, step.token_accuracy, step.lr);
      log << "seed " << seed << " iter " << it << " loss " << step.loss << " acc " << step.token_accuracy << " lr "
          << step.lr << " (" << elapsed() << " s)\n";
    }
    const bool last = it == cfg.training.iters;
    if (!last && cfg.training.eval_every > 0 && it % cfg.training.eval_every == 0) run_eval(it, lr);
    if (!last && cfg.training.checkpoint_every > 0 && it % cfg.training.checkpoint_every == 0)
      save_checkpoint((dir / ("ckpt_" + std::to_string(it) + ".bin")).string(), model);
  }
  run_eval(cfg.training.iters, lr);
  result.checkpoint = dir / "final.bin";
  save_checkpoint(result.checkpoint.string(), model);
  result.seconds = elapsed();
  return result;
}

inline std::vector<SeedResult> run_experiment(const ExperimentConfig& cfg, std::ostream& log = std::cerr) {
  std::vector<SeedResult> out;
  for (std::uint64_t s : cfg.training.seeds) out.push_back(train_seed(cfg, s, log));
  return out;
}

inline double median(std::vector<double> v) {
  require(!v.empty(), ErrorCode::EvalError, "median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace skam
