#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "dcp/model.h"
#include "dcp/scene_gen.h"
#include "dcp/tensor.h"

namespace dcp::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

// A model small enough for finite differences: 16x16 views give 2x2
// feature grids.
inline ModelConfig tiny_model(BaselineKind kind, std::size_t platforms = 2,
                              std::size_t classes = 3) {
  ModelConfig c;
  c.kind = kind;
  c.backbone.stage_channels = {3, 4, 5};
  c.backbone.feature_channels = 8;
  c.backbone.num_classes = classes;
  c.num_platforms = platforms;
  c.qk_dim = 8;
  c.request_dim = 4;
  c.embed_dim = 2;
  return c;
}

inline SceneConfig tiny_scene(ExperimentMode mode, std::size_t platforms = 2,
                              std::size_t classes = 3, std::uint64_t seed = 7) {
  SceneConfig s;
  s.mode = mode;
  s.num_platforms = platforms;
  s.world.world_size = 32;
  s.world.view_size = 16;
  s.world.num_classes = classes;
  s.world.seed = seed;
  return s;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("dcp_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace dcp::testing
