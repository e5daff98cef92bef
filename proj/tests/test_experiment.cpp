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

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "json.hpp"
#include "skam/experiment.hpp"
#include "skam/schema.hpp"

namespace skam {
namespace {

namespace fs = std::filesystem;

struct Run {
  int code = -1;
  std::string out;
};

// Runs the CLI with stderr discarded.
Run cli(const std::string& args) {
  const std::string cmd = std::string(SKAM_CLI_PATH) + " " + args + " 2>/dev/null";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("skam_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

nlohmann::json tiny_config(const std::string& out) {
  auto j = nlohmann::json::parse(R"({
    "model": {"depth": 1, "d_model": 8, "heads": 2, "persistent_slots": 4,
              "transform": {"kind": "sparsemax"}, "optimizer": {"warmup_iters": 2}},
    "task": {"kind": "sort", "base_len": 3, "seed": 4, "count": 40},
    "training": {"iters": 6, "batch_size": 4, "eval_every": 3, "eval_samples": 10,
                 "eval_multipliers": [1, 2], "seeds": [1, 2], "log_every": 2}
  })");
  j["output_dir"] = out;
  return j;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

TEST(Schema, PublishedFileMatchesEmbeddedCopy) {
  const auto published = read_file(fs::path(SKAM_SOURCE_DIR) / "docs" / "experiment.schema.json");
  EXPECT_EQ(nlohmann::json::parse(published), nlohmann::json::parse(kExperimentSchema));
}

TEST(Schema, Violations) {
  const auto good = tiny_config("/tmp/x");
  EXPECT_TRUE(validate_experiment_json(good).empty());
  auto expect_error = [](nlohmann::json j, const std::string& fragment) {
    const auto errs = validate_experiment_json(j);
    ASSERT_FALSE(errs.empty()) << j.dump();
    bool found = false;
    for (const auto& e : errs) found = found || e.find(fragment) != std::string::npos;
    EXPECT_TRUE(found) << errs.front();
    try {
      parse_experiment(j);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::ConfigError);
    }
  };
  auto j = good;
  j.erase("output_dir");
  expect_error(j, "output_dir");
  j = good;
  j["model"]["depth"] = "two";
  expect_error(j, "$.model.depth");
  j = good;
  j["model"]["transform"]["kind"] = "maxout";
  expect_error(j, "$.model.transform.kind");
  j = good;
  j["training"]["batch_size"] = 0;
  expect_error(j, "$.training.batch_size");
  j = good;
  j["training"]["unknown"] = 1;
  expect_error(j, "unknown");
  j = good;
  j["model"]["gamma"] = -1.0;
  expect_error(j, "$.model.gamma");
}

TEST(Config, DerivedDefaults) {
  const auto c = parse_experiment(tiny_config("/tmp/x"));
  EXPECT_EQ(c.model.vocab, 36u);
  EXPECT_EQ(c.model.seq_len, 8u);
  EXPECT_EQ(c.model.optimizer.max_iters, 6u);
  EXPECT_EQ(c.model.transform.kind, TransformKind::Sparsemax);
  EXPECT_EQ(c.training.seeds, (std::vector<std::uint64_t>{1, 2}));
  EXPECT_FALSE(c.training.log_elapsed);
  auto j = tiny_config("/tmp/x");
  j["training"]["eval_multipliers"] = {1.5};
  EXPECT_THROW(parse_experiment(j), Error);
  j = tiny_config("/tmp/x");
  j["model"]["d_model"] = 9;
  EXPECT_THROW(parse_experiment(j), Error);
}

TEST(Config, MultiplierLabels) {
  EXPECT_EQ(multiplier_label(1.0), "eval_x1.0");
  EXPECT_EQ(multiplier_label(2.5), "eval_x2.5");
}

TEST(Median, OddAndEven) {
  EXPECT_DOUBLE_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_DOUBLE_EQ(median({4.0, 1.0}), 2.5);
  EXPECT_THROW(median({}), Error);
}

// ---------------------------------------------------------------------------
// CLI
// ---------------------------------------------------------------------------

TEST(Cli, TransformExamples) {
  auto r = cli("transform --kind sparsemax --scores 0.8,0.4,-0.2");
  ASSERT_EQ(r.code, 0);
  auto j = nlohmann::json::parse(r.out);
  EXPECT_NEAR(j["weights"][0].get<double>(), 0.7, 1e-12);
  EXPECT_NEAR(j["weights"][1].get<double>(), 0.3, 1e-12);
  EXPECT_EQ(j["weights"][2].get<double>(), 0.0);
  EXPECT_NEAR(j["tau"].get<double>(), 0.1, 1e-12);
  EXPECT_EQ(j["support"], nlohmann::json({0, 1}));
  EXPECT_EQ(j["degenerate"], false);

  r = cli("transform --kind softmax --scores 0,0,0");
  ASSERT_EQ(r.code, 0);
  j = nlohmann::json::parse(r.out);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(j["weights"][i].get<double>(), 1.0 / 3.0, 1e-15);

  r = cli("transform --kind topk_uniform --scores 3,2,1 --k 2");
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(nlohmann::json::parse(r.out)["weights"], nlohmann::json({0.5, 0.5, 0.0}));
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("transform --scores 1,2").code, 2);
  EXPECT_EQ(cli("transform --kind bogus --scores 1,2").code, 2);
  EXPECT_EQ(cli("transform --kind entmax --alpha 0.5 --scores 1,2").code, 2);
  EXPECT_EQ(cli("verify --suite nope").code, 2);
  EXPECT_EQ(cli("bench --reps 5").code, 2);
  EXPECT_EQ(cli("train --config /nonexistent.json").code, 2);
}

TEST(Cli, VerifySuitesPass) {
  auto r = cli("verify --suite prop1 --trials 40 --alphas 2,1.5,1.3333333333");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
  for (const char* suite : {"gauss", "normrelu", "topk"}) EXPECT_EQ(cli(std::string("verify --trials 30 --suite ") + suite).code, 0);
}

TEST(Cli, BenchPrintsCsv) {
  const auto r = cli("bench --kinds softmax,sparsemax --sizes 4,16 --reps 30");
  ASSERT_EQ(r.code, 0);
  std::istringstream in(r.out);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "kind,n,median_ns");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 4);
}

TEST(Cli, BadCheckpointExitsThree) {
  const auto dir = scratch("badckpt");
  std::ofstream(dir / "bad.bin") << "NOPE";
  EXPECT_EQ(cli("eval --ckpt " + (dir / "bad.bin").string() + " --task sort --base-len 3").code, 3);
  EXPECT_EQ(cli("eval --ckpt " + (dir / "missing.bin").string() + " --task sort --base-len 3").code, 3);
  fs::remove_all(dir);
}

TEST(Cli, GenWritesDataset) {
  const auto dir = scratch("gen");
  const auto path = dir / "d.jsonl";
  ASSERT_EQ(cli("gen --task reverse --base-len 4 --seed 3 --count 5 --multiplier 2 --out " + path.string()).code, 0);
  const auto ds = read_dataset(path.string());
  ASSERT_EQ(ds.samples.size(), 5u);
  TaskSpec spec;
  spec.kind = TaskKind::Reverse;
  spec.base_len = 4;
  spec.seed = 3;
  spec.length_multiplier = 2.0;
  EXPECT_EQ(ds.samples[2], generate_sample(spec, 2));
  fs::remove_all(dir);
}

TEST(Cli, TrainIsDeterministicAndEvalReproducesMetrics) {
  const auto dir = scratch("train");
  for (const char* run : {"a", "b"}) {
    std::ofstream(dir / (std::string(run) + ".json")) << tiny_config((dir / run).string()).dump();
    const auto r = cli("train --config " + (dir / (std::string(run) + ".json")).string());
    ASSERT_EQ(r.code, 0);
    EXPECT_EQ(r.out.substr(0, r.out.find('\n')), "seed,exact_match_x1.0,exact_match_x2.0,seconds,checkpoint");
  }
  for (const char* seed : {"seed_1", "seed_2"}) {
    const auto a = read_file(dir / "a" / seed / "metrics.jsonl");
    EXPECT_FALSE(a.empty());
    EXPECT_EQ(a, read_file(dir / "b" / seed / "metrics.jsonl"));
    EXPECT_EQ(read_file(dir / "a" / seed / "final.bin"), read_file(dir / "b" / seed / "final.bin"));
  }

  // Metrics lines: train at 1, 2, 4, 6 (log_every 2), evals at 3 and 6.
  std::ifstream in(dir / "a" / "seed_1" / "metrics.jsonl");
  std::string line;
  std::vector<nlohmann::ordered_json> lines;
  while (std::getline(in, line)) lines.push_back(nlohmann::ordered_json::parse(line));
  ASSERT_EQ(lines.size(), 4u + 4u);
  const auto& first = lines.front();
  std::vector<std::string> keys;
  for (auto it = first.begin(); it != first.end(); ++it) keys.push_back(it.key());
  EXPECT_EQ(keys, (std::vector<std::string>{"iter", "split", "loss", "acc", "lr", "elapsed_s"}));
  EXPECT_EQ(first["split"], "train");
  EXPECT_TRUE(first["elapsed_s"].is_null());
  double final_acc = -1.0;
  for (const auto& l : lines)
    if (l["iter"] == 6 && l["split"] == "eval_x1.0") final_acc = l["acc"].get<double>();
  ASSERT_GE(final_acc, 0.0);

  const auto r = cli("eval --ckpt " + (dir / "a" / "seed_1" / "final.bin").string() + "," +
                     (dir / "a" / "seed_2" / "final.bin").string() +
                     " --task sort --base-len 3 --seed 4 --first 40 --count 10 --multipliers 1");
  ASSERT_EQ(r.code, 0);
  std::istringstream csv(r.out);
  std::getline(csv, line);
  EXPECT_EQ(line, "multiplier,seed,exact_match");
  std::getline(csv, line);
  EXPECT_EQ(line.substr(0, 6), "1.0,1,");
  EXPECT_EQ(std::stod(line.substr(6)), final_acc);
  int rest = 0;
  while (std::getline(csv, line)) ++rest;
  EXPECT_EQ(rest, 3);  // seed 2, median, max
  fs::remove_all(dir);
}

TEST(Cli, UntrainedModelIsNearChance) {
  const auto dir = scratch("untrained");
  MosaicConfig cfg;
  cfg.d_model = 16;
  save_checkpoint((dir / "m.bin").string(), MosaicModel<float>(cfg));
  const auto r = cli("eval --ckpt " + (dir / "m.bin").string() + " --task sort --base-len 8 --count 50");
  ASSERT_EQ(r.code, 0);
  const auto last = r.out.substr(r.out.rfind("1.0,max,") + 8);
  EXPECT_LE(std::stod(last), 0.02);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace skam
