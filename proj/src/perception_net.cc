#include "dcp/perception_net.h"

#include <cmath>

#include "dcp/errors.h"

namespace dcp {

Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out,
                      std::mt19937_64& rng) {
  const double limit =
      std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

EncoderParams EncoderParams::init(const BackboneConfig& cfg,
                                  std::mt19937_64& rng) {
  EncoderParams p;
  const auto& ch = cfg.stage_channels;
  auto conv = [&rng](std::size_t cin, std::size_t cout) {
    return glorot_uniform({3, 3, cin, cout}, 9 * cin, 9 * cout, rng);
  };
  p.conv1_w = conv(cfg.image_channels, ch[0]);
  p.conv1_b = Tensor({ch[0]});
  p.conv2_w = conv(ch[0], ch[1]);
  p.conv2_b = Tensor({ch[1]});
  p.conv3_w = conv(ch[1], ch[2]);
  p.conv3_b = Tensor({ch[2]});
  p.proj_w = glorot_uniform({ch[2], cfg.feature_channels}, ch[2],
                            cfg.feature_channels, rng);
  p.proj_b = Tensor({cfg.feature_channels});
  return p;
}

DecoderParams DecoderParams::init(const BackboneConfig& cfg,
                                  std::mt19937_64& rng) {
  DecoderParams p;
  p.cls_w = glorot_uniform({cfg.feature_channels, cfg.num_classes},
                           cfg.feature_channels, cfg.num_classes, rng);
  p.cls_b = Tensor({cfg.num_classes});
  return p;
}

Var encode_view(Graph& g, Var image, const EncoderParams& params) {
  const Tensor& img = g.value(image);
  if (img.rank() != 3) {
    throw InputError("encode_view: image must be H x W x C, got " +
                     shape_to_string(img.shape()));
  }
  if (img.dim(0) % kEncoderStride != 0 || img.dim(1) % kEncoderStride != 0) {
    throw InputError("encode_view: image dims " + shape_to_string(img.shape()) +
                     " not divisible by 8");
  }
  Var x = relu(g, conv3x3_stride2(g, image, g.param(params.conv1_w),
                                  g.param(params.conv1_b)));
  x = relu(g, conv3x3_stride2(g, x, g.param(params.conv2_w),
                              g.param(params.conv2_b)));
  x = relu(g, conv3x3_stride2(g, x, g.param(params.conv3_w),
                              g.param(params.conv3_b)));
  return conv1x1(g, x, g.param(params.proj_w), g.param(params.proj_b));
}

FeatureMap encode_view(const Tensor& image, const EncoderParams& params,
                       PlatformId platform, std::uint32_t frame) {
  Graph g;
  const Var out = encode_view(g, g.constant(image), params);
  return FeatureMap{g.value(out), platform, frame};
}

Var decode_segmentation(Graph& g, Var fused, const DecoderParams& params) {
  const Var logits =
      conv1x1(g, fused, g.param(params.cls_w), g.param(params.cls_b));
  return upsample_nearest(g, logits, kEncoderStride);
}

Tensor decode_segmentation(const FeatureMap& fused, const DecoderParams& params,
                           std::size_t image_height, std::size_t image_width) {
  if (fused.tensor.rank() != 3 ||
      fused.height() * kEncoderStride != image_height ||
      fused.width() * kEncoderStride != image_width) {
    throw DimensionError("decode_segmentation: fused grid " +
                         shape_to_string(fused.tensor.shape()) +
                         " does not match image " +
                         std::to_string(image_height) + "x" +
                         std::to_string(image_width) + " / 8");
  }
  Graph g;
  const Var out = decode_segmentation(g, g.constant(fused.tensor), params);
  return g.value(out);
}

ClassMask argmax_classes(const Tensor& logits) {
  if (logits.rank() != 3) {
    throw DimensionError("argmax_classes: expected H x W x K, got " +
                         shape_to_string(logits.shape()));
  }
  const std::size_t h = logits.dim(0), w = logits.dim(1), k = logits.dim(2);
  ClassMask mask(h, w);
  for (std::size_t p = 0; p < h * w; ++p) {
    const double* row = logits.data().data() + p * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (row[j] > row[best]) best = j;
    }
    mask.labels[p] = static_cast<std::uint8_t>(best);
  }
  return mask;
}

}  // namespace dcp
