#include "dcp/smim.h"

#include <string>

#include "dcp/errors.h"

namespace dcp {

SmimParams SmimParams::init(std::size_t feature_channels, std::size_t qk_dim,
                            std::size_t request_dim, std::mt19937_64& rng,
                            bool require_compression) {
  if (request_dim == 0 || request_dim > qk_dim ||
      (require_compression && 2 * request_dim > qk_dim)) {
    throw ConfigError("request_dim " + std::to_string(request_dim) +
                      " is out of range for qk_dim " +
                      std::to_string(qk_dim));
  }
  SmimParams p;
  const std::size_t c = feature_channels;
  p.theta_q_w = glorot_uniform({c, qk_dim}, c, qk_dim, rng);
  p.theta_q_b = Tensor({qk_dim});
  p.theta_k_w = glorot_uniform({c, qk_dim}, c, qk_dim, rng);
  p.theta_k_b = Tensor({qk_dim});
  p.theta_r_w = glorot_uniform({c, request_dim}, c, request_dim, rng);
  p.theta_r_b = Tensor({request_dim});
  p.w_alpha = glorot_uniform({request_dim, qk_dim}, request_dim, qk_dim, rng);
  return p;
}

double SmimConfig::collaboration_threshold() const {
  return 1.0 / static_cast<double>(num_platforms - 1);
}

void SmimConfig::validate() const {
  if (num_platforms < 2) {
    throw ConfigError("collaboration needs at least 2 platforms");
  }
  if (!(request_threshold >= 0.0 && request_threshold <= 1.0)) {
    throw ConfigError("request_threshold must lie in [0, 1], got " +
                      std::to_string(request_threshold));
  }
}

namespace {

Var linear(Graph& g, Var row, const Tensor& w, const Tensor& b) {
  const Var out = matmul(g, row, g.param(w));
  return add(g, out, reshape(g, g.param(b), {1, b.size()}));
}

Var pooled(Graph& g, Var feature, const SmimParams& params) {
  const Tensor& f = g.value(feature);
  if (f.rank() != 3 || f.dim(2) != params.feature_channels()) {
    throw DimensionError("SMIM expects H x W x " +
                         std::to_string(params.feature_channels()) +
                         " features, got " + shape_to_string(f.shape()));
  }
  return mean_pool(g, feature);
}

}  // namespace

QueryKey encode_query_key(Graph& g, Var feature, const SmimParams& params) {
  const Var v = pooled(g, feature, params);
  return QueryKey{linear(g, v, params.theta_q_w, params.theta_q_b),
                  linear(g, v, params.theta_k_w, params.theta_k_b)};
}

Var self_confidence(Graph& g, Var q, Var k) {
  if (g.value(q).shape() != g.value(k).shape()) {
    throw DimensionError("self_confidence: query " +
                         shape_to_string(g.value(q).shape()) + " vs key " +
                         shape_to_string(g.value(k).shape()));
  }
  return sigmoid(g, matmul(g, q, transpose(g, k)));
}

double self_confidence(std::span<const double> q, std::span<const double> k) {
  if (q.size() != k.size()) {
    throw DimensionError("self_confidence: query dim " +
                         std::to_string(q.size()) + " vs key dim " +
                         std::to_string(k.size()));
  }
  double c = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) c += q[i] * k[i];
  return sigmoid_value(c);
}

bool decide_request(double confidence, const SmimConfig& config) {
  return confidence < config.request_threshold;
}

Var encode_request(Graph& g, Var feature, const SmimParams& params) {
  return linear(g, pooled(g, feature, params), params.theta_r_w,
                params.theta_r_b);
}

Var candidate_relevance(Graph& g, Var request, Var key, Var w_alpha) {
  const Shape& r = g.value(request).shape();
  const Shape& k = g.value(key).shape();
  const Shape& w = g.value(w_alpha).shape();
  if (r.size() != 2 || k.size() != 2 || w.size() != 2 || r[1] != w[0] ||
      k[1] != w[1]) {
    throw DimensionError("candidate_relevance: request " + shape_to_string(r) +
                         ", key " + shape_to_string(k) + ", W_alpha " +
                         shape_to_string(w));
  }
  return matmul(g, matmul(g, request, w_alpha), transpose(g, key));
}

double candidate_relevance(std::span<const double> request,
                           std::span<const double> key, const Tensor& w_alpha) {
  if (w_alpha.rank() != 2 || request.size() != w_alpha.dim(0) ||
      key.size() != w_alpha.dim(1)) {
    throw DimensionError("candidate_relevance: request dim " +
                         std::to_string(request.size()) + ", key dim " +
                         std::to_string(key.size()) + ", W_alpha " +
                         shape_to_string(w_alpha.shape()));
  }
  // Same association order as the graph version: (r^T W) k.
  const std::size_t rd = w_alpha.dim(0), kd = w_alpha.dim(1);
  std::vector<double> projected(kd, 0.0);
  for (std::size_t i = 0; i < rd; ++i) {
    const double s = request[i];
    if (s == 0.0) continue;
    for (std::size_t j = 0; j < kd; ++j) projected[j] += s * w_alpha[i * kd + j];
  }
  double out = 0.0;
  for (std::size_t j = 0; j < kd; ++j) out += projected[j] * key[j];
  return out;
}

std::vector<double> match_scores(std::span<const double> relevances) {
  if (relevances.empty()) {
    throw ProtocolError("match_scores: requester received no relevance replies");
  }
  Tensor logits({relevances.size()},
                std::vector<double>(relevances.begin(), relevances.end()));
  const Tensor s = softmax_values(logits, 0);
  return s.values();
}

std::vector<std::size_t> select_supporters(std::span<const double> scores,
                                           std::size_t num_platforms) {
  if (num_platforms < 2) throw ConfigError("select_supporters: N < 2");
  if (num_platforms == 2 && scores.size() == 1) return {0};
  const double bound = 1.0 / static_cast<double>(num_platforms - 1);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] > bound) out.push_back(i);
  }
  return out;
}

}  // namespace dcp
