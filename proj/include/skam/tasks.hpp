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

// Synthetic sequence tasks (multi-query multi-token associative recall,
// reverse, sort) and exact-match scoring.
//
// A sample is a token stream S; input = S[0..n-2], target = S[1..n-1], and
// mask marks the targets that are scored.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "skam/common.hpp"
#include "skam/rng.hpp"

namespace skam {

struct TaskSample {
  std::vector<std::uint32_t> input;
  std::vector<std::uint32_t> target;
  std::vector<std::uint8_t> mask;

  bool operator==(const TaskSample&) const = default;
};

enum class TaskKind { MQMTAR, Reverse, Sort };

inline std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::MQMTAR: return "mqmtar";
    case TaskKind::Reverse: return "reverse";
    case TaskKind::Sort: return "sort";
  }
  return "?";
}

inline TaskKind parse_task_kind(std::string_view name) {
  if (name == "mqmtar") return TaskKind::MQMTAR;
  if (name == "reverse") return TaskKind::Reverse;
  if (name == "sort") return TaskKind::Sort;
  fail(ErrorCode::ConfigError, "unknown task kind '" + std::string(name) + "'");
}

namespace tokens {

// Reverse / sort.
inline constexpr std::uint32_t kSeqValues = 32;
inline constexpr std::uint32_t kBos = 32, kSep = 33, kEos = 34, kSeqPad = 35;
inline constexpr std::uint32_t kSeqVocab = 36;

// Associative recall. Ids 256-258 are reserved utility tokens.
inline constexpr std::uint32_t kRecallValues = 256;
inline constexpr std::uint32_t kKvDelim = 259, kQueryDelim = 260, kAnswerDelim = 261, kRecallPad = 262;
inline constexpr std::uint32_t kRecallVocab = 263;
inline constexpr std::size_t kQueries = 4;

}  // namespace tokens

inline std::uint32_t task_vocab(TaskKind k) {
  return k == TaskKind::MQMTAR ? tokens::kRecallVocab : tokens::kSeqVocab;
}

inline std::uint32_t task_pad(TaskKind k) { return k == TaskKind::MQMTAR ? tokens::kRecallPad : tokens::kSeqPad; }

struct TaskSpec {
  TaskKind kind = TaskKind::Sort;
  std::size_t base_len = 16;    // sequence length (reverse/sort) or pair count (recall) at multiplier 1
  double length_multiplier = 1.0;
  std::uint64_t seed = 0;
  std::size_t count = 1000;

  /// base_len * multiplier, which must be a positive integer.
  std::size_t content_length() const {
    require(base_len >= 1, ErrorCode::GenerationError, "base_len must be >= 1");
    require(std::isfinite(length_multiplier) && length_multiplier > 0.0, ErrorCode::GenerationError,
            "length multiplier must be positive");
    const double len = static_cast<double>(base_len) * length_multiplier;
    const double rounded = std::round(len);
    require(rounded >= 1.0 && std::abs(len - rounded) <= 1e-9 * std::max(1.0, len), ErrorCode::GenerationError,
            "base_len * multiplier = " + std::to_string(len) + " is not an integer");
    return static_cast<std::size_t>(rounded);
  }
};

namespace detail {

inline TaskSample frame(const std::vector<std::uint32_t>& stream, const std::vector<std::uint8_t>& scored) {
  TaskSample s;
  s.input.assign(stream.begin(), stream.end() - 1);
  s.target.assign(stream.begin() + 1, stream.end());
  s.mask.assign(scored.begin() + 1, scored.end());
  return s;
}

inline TaskSample sequence_sample(const std::vector<std::uint32_t>& x, const std::vector<std::uint32_t>& y) {
  std::vector<std::uint32_t> stream{tokens::kBos};
  stream.insert(stream.end(), x.begin(), x.end());
  stream.push_back(tokens::kSep);
  std::vector<std::uint8_t> scored(stream.size(), 0);
  stream.insert(stream.end(), y.begin(), y.end());
  stream.push_back(tokens::kEos);
  scored.resize(stream.size(), 1);
  return frame(stream, scored);
}

inline std::vector<std::uint32_t> random_content(const TaskSpec& spec, std::size_t index) {
  Rng rng(derive_seed(spec.seed, index));
  std::vector<std::uint32_t> x(spec.content_length());
  for (auto& t : x) t = static_cast<std::uint32_t>(rng.below(tokens::kSeqValues));
  return x;
}

}  // namespace detail

/// BOS x SEP reverse(x) EOS.
inline TaskSample reverse_sample(const TaskSpec& spec, std::size_t index) {
  auto x = detail::random_content(spec, index);
  std::vector<std::uint32_t> y(x.rbegin(), x.rend());
  return detail::sequence_sample(x, y);
}

/// BOS x SEP sort(x) EOS, duplicates kept.
inline TaskSample sort_sample(const TaskSpec& spec, std::size_t index) {
  auto x = detail::random_content(spec, index);
  auto y = x;
  std::sort(y.begin(), y.end());
  return detail::sequence_sample(x, y);
}

/// (KV ka kb va vb) x P, Q q1..q4 (2 tokens each), ANS and the 8 answer tokens.
/// Keys are distinct; queries are distinct when P >= 4 and repeat otherwise.
inline TaskSample mqmtar_sample(const TaskSpec& spec, std::size_t index) {
  const std::size_t pairs = spec.content_length();
  constexpr std::size_t kKeySpace = std::size_t{tokens::kRecallValues} * tokens::kRecallValues;
  require(pairs <= kKeySpace, ErrorCode::GenerationError,
          std::to_string(pairs) + " pairs exceed the " + std::to_string(kKeySpace) + " distinct keys");
  Rng rng(derive_seed(spec.seed, index));

  std::vector<std::uint32_t> keys, values;
  std::unordered_set<std::uint32_t> used;
  while (keys.size() < pairs) {
    const auto k = static_cast<std::uint32_t>(rng.below(kKeySpace));
    if (used.insert(k).second) keys.push_back(k);
  }
  for (std::size_t i = 0; i < pairs; ++i) values.push_back(static_cast<std::uint32_t>(rng.below(kKeySpace)));

  std::vector<std::size_t> queries;
  if (pairs >= tokens::kQueries) {
    std::vector<std::size_t> order(pairs);
    for (std::size_t i = 0; i < pairs; ++i) order[i] = i;
    for (std::size_t i = 0; i < tokens::kQueries; ++i) {
      std::swap(order[i], order[i + rng.below(pairs - i)]);
      queries.push_back(order[i]);
    }
  } else {
    for (std::size_t i = 0; i < tokens::kQueries; ++i) queries.push_back(rng.below(pairs));
  }

  auto split = [](std::vector<std::uint32_t>& out, std::uint32_t v) {
    out.push_back(v / tokens::kRecallValues);
    out.push_back(v % tokens::kRecallValues);
  };
  std::vector<std::uint32_t> stream;
  for (std::size_t i = 0; i < pairs; ++i) {
    stream.push_back(tokens::kKvDelim);
    split(stream, keys[i]);
    split(stream, values[i]);
  }
  stream.push_back(tokens::kQueryDelim);
  for (std::size_t q : queries) split(stream, keys[q]);
  stream.push_back(tokens::kAnswerDelim);
  std::vector<std::uint8_t> scored(stream.size(), 0);
  for (std::size_t q : queries) split(stream, values[q]);
  scored.resize(stream.size(), 1);
  return detail::frame(stream, scored);
}

inline TaskSample generate_sample(const TaskSpec& spec, std::size_t index) {
  switch (spec.kind) {
    case TaskKind::MQMTAR: return mqmtar_sample(spec, index);
    case TaskKind::Reverse: return reverse_sample(spec, index);
    case TaskKind::Sort: return sort_sample(spec, index);
  }
  fail(ErrorCode::GenerationError, "unhandled task kind");
}

inline std::vector<TaskSample> generate(const TaskSpec& spec) {
  std::vector<TaskSample> out;
  out.reserve(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) out.push_back(generate_sample(spec, i));
  return out;
}

/// Fraction of samples whose masked positions are all predicted correctly.
/// Samples without masked positions are skipped with a warning on stderr.
inline double exact_match(const std::vector<std::vector<std::uint32_t>>& predictions,
                          const std::vector<TaskSample>& samples) {
  require(predictions.size() == samples.size(), ErrorCode::EvalError, "prediction and sample counts differ");
  std::size_t scored = 0, correct = 0, skipped = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    require(predictions[i].size() == s.target.size() && s.mask.size() == s.target.size(), ErrorCode::EvalError,
            "length mismatch in sample " + std::to_string(i));
    bool any = false, ok = true;
    for (std::size_t t = 0; t < s.target.size(); ++t) {
      if (!s.mask[t]) continue;
      any = true;
      ok = ok && predictions[i][t] == s.target[t];
    }
    if (!any) {
      ++skipped;
      continue;
    }
    ++scored;
    correct += ok ? 1 : 0;
  }
  if (skipped > 0) std::cerr << "warning: " << skipped << " sample(s) with empty mask excluded from exact match\n";
  require(scored > 0, ErrorCode::EvalError, "no sample has a masked position");
  return static_cast<double>(correct) / static_cast<double>(scored);
}

// ---------------------------------------------------------------------------
// Dataset files (JSON Lines)
// ---------------------------------------------------------------------------

inline constexpr std::string_view kDatasetFormat = "skam-task/1";

struct Dataset {
  TaskSpec spec;
  std::uint32_t vocab = 0;
  std::vector<TaskSample> samples;
};

inline void write_dataset(std::ostream& out, const TaskSpec& spec, const std::vector<TaskSample>& samples) {
  nlohmann::json header = {{"format", kDatasetFormat},
                           {"kind", to_string(spec.kind)},
                           {"vocab", task_vocab(spec.kind)},
                           {"seed", spec.seed},
                           {"base_len", spec.base_len},
                           {"multiplier", spec.length_multiplier},
                           {"count", samples.size()}};
  out << header.dump() << '\n';
  for (const auto& s : samples) {
    nlohmann::json line = {{"input", s.input}, {"target", s.target}, {"mask", s.mask}};
    out << line.dump() << '\n';
  }
}

inline void write_dataset(const std::string& path, const TaskSpec& spec, const std::vector<TaskSample>& samples) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::IoError, "cannot open '" + path + "' for writing");
  write_dataset(out, spec, samples);
}

inline Dataset read_dataset(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::IoError, "cannot open dataset '" + path + "'");
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  try {
    require(static_cast<bool>(std::getline(in, line)), ErrorCode::IoError, "dataset '" + path + "' is empty");
    ++lineno;
    const auto header = nlohmann::json::parse(line);
    require(header.value("format", "") == kDatasetFormat, ErrorCode::IoError,
            "dataset '" + path + "' is not in " + std::string(kDatasetFormat) + " format");
    ds.spec.kind = parse_task_kind(header.at("kind").get<std::string>());
    ds.spec.seed = header.at("seed").get<std::uint64_t>();
    ds.spec.base_len = header.value("base_len", std::size_t{1});
    ds.spec.length_multiplier = header.value("multiplier", 1.0);
    ds.vocab = header.at("vocab").get<std::uint32_t>();
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      TaskSample s{j.at("input").get<std::vector<std::uint32_t>>(), j.at("target").get<std::vector<std::uint32_t>>(),
                   j.at("mask").get<std::vector<std::uint8_t>>()};
      require(s.input.size() == s.target.size() && s.mask.size() == s.target.size(), ErrorCode::ShapeError,
              "line " + std::to_string(lineno) + ": input, target and mask lengths differ");
      for (auto t : s.input)
        require(t < ds.vocab, ErrorCode::InvalidToken, "line " + std::to_string(lineno) + ": token out of vocabulary");
      ds.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::IoError, path + ":" + std::to_string(lineno) + ": " + e.what());
  }
  ds.spec.count = ds.samples.size();
  return ds;
}

}  // namespace skam
