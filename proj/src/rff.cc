#include "dcp/rff.h"

#include <string>

#include "dcp/errors.h"
#include "dcp/perception_net.h"

namespace dcp {

RffParams RffParams::init(std::size_t feature_channels, std::size_t embed_dim,
                          std::mt19937_64& rng) {
  if (embed_dim == 0 || 4 * embed_dim > feature_channels) {
    throw ConfigError("embed_dim " + std::to_string(embed_dim) +
                      " must be in [1, C/4] with C " +
                      std::to_string(feature_channels));
  }
  const std::size_t c = feature_channels;
  RffParams p;
  p.theta_w = glorot_uniform({c, embed_dim}, c, embed_dim, rng);
  p.theta_b = Tensor({embed_dim});
  p.phi_w = glorot_uniform({c, embed_dim}, c, embed_dim, rng);
  p.g_w = glorot_uniform({c, c}, c, c, rng);
  p.g_b = Tensor({c});
  return p;
}

Embeddings embed_features(Graph& g, Var local, Var collaborative,
                          const RffParams& params) {
  const Tensor& l = g.value(local);
  const Tensor& c = g.value(collaborative);
  if (l.shape() != c.shape() || l.rank() != 3) {
    throw DimensionError("RFF: local feature " + shape_to_string(l.shape()) +
                         " and collaborative feature " +
                         shape_to_string(c.shape()) + " must match");
  }
  if (l.dim(0) * l.dim(1) > kMaxFusionPixels) {
    throw ConfigError("RFF: fusion grid " + shape_to_string(l.shape()) +
                      " exceeds " + std::to_string(kMaxFusionPixels) +
                      " pixels");
  }
  // A key bias would add a per-row constant that the row softmax cancels.
  const Var no_bias = g.constant(Tensor({params.embed_dim()}));
  return Embeddings{
      conv1x1(g, local, g.param(params.theta_w), g.param(params.theta_b)),
      conv1x1(g, collaborative, g.param(params.phi_w), no_bias),
      conv1x1(g, collaborative, g.param(params.g_w), g.param(params.g_b))};
}

Var affinity(Graph& g, Var theta, Var phi) {
  const Shape& ts = g.value(theta).shape();
  const Shape& ps = g.value(phi).shape();
  if (ts.size() != 3 || ts != ps) {
    throw DimensionError("affinity: embeddings " + shape_to_string(ts) +
                         " and " + shape_to_string(ps) + " must match");
  }
  const std::size_t hw = ts[0] * ts[1];
  const Var tf = reshape(g, theta, {hw, ts[2]});
  const Var pf = reshape(g, phi, {hw, ts[2]});
  return softmax(g, matmul(g, tf, transpose(g, pf)), 1);
}

Var related_feature(Graph& g, Var affinity_matrix, Var g_out) {
  const Shape& gs = g.value(g_out).shape();
  const Shape& as = g.value(affinity_matrix).shape();
  if (gs.size() != 3 || as.size() != 2 || as[0] != as[1] ||
      as[1] != gs[0] * gs[1]) {
    throw DimensionError("related_feature: affinity " + shape_to_string(as) +
                         " incompatible with g(F_c) " + shape_to_string(gs));
  }
  const Var flat = reshape(g, g_out, {gs[0] * gs[1], gs[2]});
  return reshape(g, matmul(g, affinity_matrix, flat), gs);
}

Var related_feature_for(Graph& g, Var local, Var collaborative,
                        const RffParams& params) {
  const Embeddings e = embed_features(g, local, collaborative, params);
  return related_feature(g, affinity(g, e.theta, e.phi), e.g);
}

Var fuse(Graph& g, Var local, std::span<const std::optional<Var>> related,
         Var confidence, std::span<const Var> weights,
         const FuseOptions& options) {
  if (related.size() != weights.size()) {
    throw DimensionError("fuse: " + std::to_string(related.size()) +
                         " related features but " +
                         std::to_string(weights.size()) + " weights");
  }
  const Shape& ls = g.value(local).shape();
  const Var kept = scale_by(g, local, confidence);
  if (!options.requested) {
    return options.eq9_literal ? kept : local;
  }
  std::optional<Var> mixture;
  for (std::size_t j = 0; j < related.size(); ++j) {
    const double w = g.value(weights[j]).item();
    if (!related[j]) {
      if (w != 0.0) {
        throw ProtocolError("fuse: no related feature for candidate slot " +
                            std::to_string(j) + " with match score " +
                            std::to_string(w));
      }
      continue;
    }
    if (g.value(*related[j]).shape() != ls) {
      throw DimensionError("fuse: related feature " +
                           shape_to_string(g.value(*related[j]).shape()) +
                           " vs local " + shape_to_string(ls));
    }
    const Var term = scale_by(g, *related[j], weights[j]);
    mixture = mixture ? add(g, *mixture, term) : term;
  }
  if (!mixture) return kept;
  const Var complement = shift(g, scale(g, confidence, -1.0), 1.0);
  return add(g, kept, scale_by(g, *mixture, complement));
}

}  // namespace dcp
