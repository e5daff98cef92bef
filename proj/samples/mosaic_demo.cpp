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

// Trains a small memory mosaic on the reverse task and prints one prediction.
//
//   mosaic_demo [iters] [transform]

#include <cstdlib>
#include <iostream>
#include <string>

#include "skam/experiment.hpp"
#include "skam/mosaic.hpp"
#include "skam/tasks.hpp"

int main(int argc, char** argv) {
  const std::size_t iters = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 300;
  const std::string kind = argc > 2 ? argv[2] : "sparsemax";

  skam::TaskSpec task;
  task.kind = skam::TaskKind::Reverse;
  task.base_len = 6;
  task.count = 4000;

  skam::MosaicConfig cfg;
  cfg.depth = 2;
  cfg.d_model = 32;
  cfg.heads = 2;
  cfg.vocab = skam::task_vocab(task.kind);
  cfg.persistent_slots = 16;
  cfg.transform.kind = skam::parse_transform_kind(kind);
  cfg.optimizer.max_iters = iters;
  cfg.optimizer.warmup_iters = iters / 10;

  try {
    skam::MosaicModel<float> model(cfg);
    skam::Trainer<float> trainer(model);
    const auto data = skam::generate(task);
    std::size_t next = 0;
    for (std::size_t it = 1; it <= iters; ++it) {
      std::vector<skam::Example> batch;
      for (int b = 0; b < 32; ++b, next = (next + 1) % data.size())
        batch.push_back({data[next].input, data[next].target, data[next].mask});
      const auto r = trainer.step(batch);
      if (it % 50 == 0 || it == 1) std::cout << "iter " << it << " loss " << r.loss << " acc " << r.token_accuracy << '\n';
    }

    const auto held_out = skam::eval_samples(task, 1.0, task.count, 200);
    std::cout << "held-out exact match " << skam::evaluate(model, held_out).exact_match << '\n';

    const auto& s = held_out.front();
    const auto pred = skam::predict_tokens(model, std::span<const std::uint32_t>(s.input));
    std::cout << "input      ";
    for (auto t : s.input) std::cout << ' ' << t;
    std::cout << "\npredicted  ";
    for (std::size_t t = 0; t < pred.size(); ++t) {
      if (s.mask[t])
        std::cout << ' ' << pred[t];
      else
        std::cout << " .";
    }
    std::cout << '\n';
  } catch (const skam::Error& e) {
    std::cerr << e.what() << '\n';
    return 1;
  }
  return 0;
}
