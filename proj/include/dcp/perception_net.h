#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>

#include "dcp/autodiff.h"
#include "dcp/tensor.h"

namespace dcp {

using PlatformId = std::uint16_t;

// Dense H' x W' x C activation grid produced by one platform for one frame.
struct FeatureMap {
  Tensor tensor;
  PlatformId source_platform = 0;
  std::uint32_t frame = 0;

  std::size_t height() const { return tensor.dim(0); }
  std::size_t width() const { return tensor.dim(1); }
  std::size_t channels() const { return tensor.dim(2); }
};

// Spatial reduction of the toy encoder (three stride-2 stages).
inline constexpr std::size_t kEncoderStride = 8;

struct BackboneConfig {
  std::size_t image_channels = 3;
  std::array<std::size_t, 3> stage_channels = {8, 16, 32};
  std::size_t feature_channels = 32;
  std::size_t num_classes = 6;
};

// Uniform in +-sqrt(6 / (fan_in + fan_out)).
Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out,
                      std::mt19937_64& rng);

struct EncoderParams {
  Tensor conv1_w, conv1_b;
  Tensor conv2_w, conv2_b;
  Tensor conv3_w, conv3_b;
  Tensor proj_w, proj_b;

  static EncoderParams init(const BackboneConfig& cfg, std::mt19937_64& rng);

  template <class F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit(Self& p, F& f) {
    f("conv1_w", p.conv1_w);
    f("conv1_b", p.conv1_b);
    f("conv2_w", p.conv2_w);
    f("conv2_b", p.conv2_b);
    f("conv3_w", p.conv3_w);
    f("conv3_b", p.conv3_b);
    f("proj_w", p.proj_w);
    f("proj_b", p.proj_b);
  }
};

struct DecoderParams {
  Tensor cls_w, cls_b;

  static DecoderParams init(const BackboneConfig& cfg, std::mt19937_64& rng);

  template <class F>
  void for_each(F&& f) {
    f("cls_w", cls_w);
    f("cls_b", cls_b);
  }
  template <class F>
  void for_each(F&& f) const {
    f("cls_w", cls_w);
    f("cls_b", cls_b);
  }
};

// Three stride-2 conv3x3+ReLU stages, then a conv1x1 projection to C
// channels. image is H x W x 3 with H, W divisible by 8.
Var encode_view(Graph& g, Var image, const EncoderParams& params);
FeatureMap encode_view(const Tensor& image, const EncoderParams& params,
                       PlatformId platform = 0, std::uint32_t frame = 0);

// conv1x1 to K class logits followed by 8x nearest-neighbour upsampling.
Var decode_segmentation(Graph& g, Var fused, const DecoderParams& params);
// Checks the fused grid against the target image size before decoding.
Tensor decode_segmentation(const FeatureMap& fused, const DecoderParams& params,
                           std::size_t image_height, std::size_t image_width);

// Per-pixel argmax of H x W x K logits; ties go to the lowest class id.
ClassMask argmax_classes(const Tensor& logits);

}  // namespace dcp
