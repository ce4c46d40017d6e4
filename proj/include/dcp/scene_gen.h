#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "dcp/tensor.h"

namespace dcp {

// Interleaved H x W x C image with values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 3;
  std::vector<float> data;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c = 3, float fill = 0.0f)
      : height(h), width(w), channels(c), data(h * w * c, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t ch) {
    return data[(y * width + x) * channels + ch];
  }
  float at(std::size_t y, std::size_t x, std::size_t ch) const {
    return data[(y * width + x) * channels + ch];
  }

  Tensor to_tensor() const;
  friend bool operator==(const Image&, const Image&) = default;
};

struct WorldSpec {
  std::size_t world_size = 128;
  std::size_t view_size = 64;
  std::size_t num_classes = 6;
  // Multiplier on the default shape count; 0 leaves pure background.
  double shape_density = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct World {
  Image image;
  ClassMask mask;
};

World generate_world(const WorldSpec& spec);

// RGB colour used to paint class `cls`.
std::array<float, 3> class_color(std::size_t cls);

struct View {
  Image image;
  ClassMask mask;
  std::size_t offset_y = 0;
  std::size_t offset_x = 0;
};

View crop(const World& world, std::size_t offset_y, std::size_t offset_x,
          std::size_t size);
// `count` uniformly placed view_size crops.
std::vector<View> crop_views(const World& world, const WorldSpec& spec,
                             std::size_t count, std::mt19937_64& rng);

enum class NoiseKind { kGaussian, kOcclusion, kBlur };

std::string_view to_string(NoiseKind kind);
NoiseKind parse_noise_kind(std::string_view name);

struct NoiseConfig {
  std::vector<NoiseKind> kinds = {NoiseKind::kGaussian, NoiseKind::kOcclusion};
  double gaussian_sigma = 0.3;
  double occlusion_min_area = 0.25;
  double occlusion_max_area = 0.5;
  // Probability that the victim's view is degraded in a frame.
  double degrade_probability = 0.5;
};

// Applies every configured kind in order gaussian -> blur -> occlusion.
Image degrade(const Image& view, const NoiseConfig& config, std::mt19937_64& rng);
Image add_gaussian_noise(const Image& view, double sigma, std::mt19937_64& rng);
Image occlude(const Image& view, double min_area, double max_area,
              std::mt19937_64& rng);
Image box_blur5(const Image& view);

// Fixed channel remap plus a 2x down/up-sample round trip emulating a
// second imaging payload.
Image second_sensor_transform(const Image& view);

enum class ExperimentMode { kHomoCis, kHomoPis, kHeteroPis };

std::string_view to_string(ExperimentMode mode);
ExperimentMode parse_mode(std::string_view name);

struct SceneSample {
  std::vector<Image> views;
  std::vector<ClassMask> masks;
  std::vector<bool> degraded;
  std::size_t victim = 0;
  // Platform holding the victim's noise-free view (Homo-CIS, degraded only).
  std::optional<std::size_t> clean_twin;
  ExperimentMode mode = ExperimentMode::kHomoCis;
  std::uint64_t seed = 0;
  std::uint64_t index = 0;

  std::size_t num_platforms() const { return views.size(); }
  friend bool operator==(const SceneSample&, const SceneSample&) = default;
};

struct SceneConfig {
  WorldSpec world;
  NoiseConfig noise;
  ExperimentMode mode = ExperimentMode::kHomoCis;
  std::size_t num_platforms = 4;

  void validate() const;
};

// Sample `index` of the stream seeded by config.world.seed. Depends only on
// (config, index).
SceneSample make_sample(const SceneConfig& config, std::uint64_t index);

// Samples [first, first + count) of the stream.
std::vector<SceneSample> assemble_mode(const SceneConfig& config,
                                       std::size_t count,
                                       std::uint64_t first = 0,
                                       unsigned threads = 1);

struct Dataset {
  SceneConfig config;
  std::vector<SceneSample> samples;
};

// Manifest text file plus one DCPT tensor per view and mask.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace dcp
