#pragma once

// Small end-to-end configurations that train in well under a second.

#include "sapfuse/train.hpp"

namespace testing_support {

inline sapfuse::harness::RunConfig tiny_run_config(std::uint64_t seed = 1) {
  sapfuse::harness::RunConfig c;
  c.data.height = c.data.width = 16;
  c.data.max_objects = 2;
  c.system.max_objects = 2;
  c.data.min_size = 3;
  c.data.max_size = 6;
  c.system.image_height = c.system.image_width = 16;
  c.system.grid = {4, 4};
  c.system.layers = 2;
  c.system.heads = 2;
  c.system.width = 8;
  c.system.ffn_width = 8;
  c.system.fusion_queries = 2;
  c.train_scenes = 12;
  c.test_scenes = 6;
  c.steps = 5;
  c.batch_size = 4;
  c.seed = seed;
  return c;
}

}  // namespace testing_support
