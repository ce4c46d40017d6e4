#pragma once

#include <cstddef>
#include <map>
#include <random>
#include <span>
#include <vector>

#include "dcp/autodiff.h"
#include "dcp/perception_net.h"

namespace dcp {

// Query/key/request encoders shared by every platform. All encoders act on
// the globally average-pooled feature vector.
struct SmimParams {
  Tensor theta_q_w, theta_q_b;  // C x qk, qk
  Tensor theta_k_w, theta_k_b;  // C x qk, qk
  Tensor theta_r_w, theta_r_b;  // C x r, r
  Tensor w_alpha;               // r x qk

  // Throws ConfigError unless 1 <= request_dim <= qk_dim / 2. With
  // `require_compression` off the bound loosens to request_dim <= qk_dim.
  static SmimParams init(std::size_t feature_channels, std::size_t qk_dim,
                         std::size_t request_dim, std::mt19937_64& rng,
                         bool require_compression = true);

  std::size_t feature_channels() const { return theta_q_w.dim(0); }
  std::size_t qk_dim() const { return theta_q_w.dim(1); }
  std::size_t request_dim() const { return theta_r_w.dim(1); }

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
    f("theta_q_w", p.theta_q_w);
    f("theta_q_b", p.theta_q_b);
    f("theta_k_w", p.theta_k_w);
    f("theta_k_b", p.theta_k_b);
    f("theta_r_w", p.theta_r_w);
    f("theta_r_b", p.theta_r_b);
    f("w_alpha", p.w_alpha);
  }
};

struct SmimConfig {
  double request_threshold = 0.8;
  std::size_t num_platforms = 4;

  // Fixed at 1 / (N - 1).
  double collaboration_threshold() const;
  void validate() const;
};

// Per-platform outcome of the self/mutual information match.
struct SmimState {
  std::vector<double> q, k, r;
  double correlation = 0.0;  // q . k
  double confidence = 0.0;   // sigmoid(correlation)
  std::map<PlatformId, double> match_scores;
  bool requested = false;
  std::vector<PlatformId> supporters;
};

struct QueryKey {
  Var q;  // 1 x qk
  Var k;  // 1 x qk
};

QueryKey encode_query_key(Graph& g, Var feature, const SmimParams& params);
// sigmoid(q . k) as a 1 x 1 node.
Var self_confidence(Graph& g, Var q, Var k);
double self_confidence(std::span<const double> q, std::span<const double> k);

// True iff the platform should ask for help: p strictly below the request
// threshold. A tie stays local.
bool decide_request(double confidence, const SmimConfig& config);

// Compact request vector r (1 x request_dim).
Var encode_request(Graph& g, Var feature, const SmimParams& params);

// Un-normalised relevance r^T W_alpha k evaluated on the candidate side.
Var candidate_relevance(Graph& g, Var request, Var key, Var w_alpha);
double candidate_relevance(std::span<const double> request,
                           std::span<const double> key, const Tensor& w_alpha);

// Softmax over candidates. Throws ProtocolError on an empty set.
std::vector<double> match_scores(std::span<const double> relevances);

// Positions i with scores[i] > 1 / (N - 1). With N = 2 the bound is
// unsatisfiable, so the single candidate is returned instead.
std::vector<std::size_t> select_supporters(std::span<const double> scores,
                                           std::size_t num_platforms);

}  // namespace dcp
