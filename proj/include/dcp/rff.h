#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <span>

#include "dcp/autodiff.h"

namespace dcp {

// Largest H' * W' grid the dense HW x HW affinity is allowed to cover.
inline constexpr std::size_t kMaxFusionPixels = 256;

struct RffParams {
  Tensor theta_w, theta_b;  // C x C', C'
  Tensor phi_w;             // C x C', no bias
  Tensor g_w, g_b;          // C x C, C

  // Throws ConfigError unless 1 <= embed_dim <= C / 4.
  static RffParams init(std::size_t feature_channels, std::size_t embed_dim,
                        std::mt19937_64& rng);

  std::size_t feature_channels() const { return g_w.dim(0); }
  std::size_t embed_dim() const { return theta_w.dim(1); }

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
    f("theta_w", p.theta_w);
    f("theta_b", p.theta_b);
    f("phi_w", p.phi_w);
    f("g_w", p.g_w);
    f("g_b", p.g_b);
  }
};

struct Embeddings {
  Var theta;  // H' x W' x C'   from the local feature
  Var phi;    // H' x W' x C'   from the collaborative feature
  Var g;      // H' x W' x C    from the collaborative feature
};

Embeddings embed_features(Graph& g, Var local, Var collaborative,
                          const RffParams& params);

// Row-softmax of theta_flat * phi_flat^T, an HW x HW row-stochastic matrix.
Var affinity(Graph& g, Var theta, Var phi);

// A * g_flat reshaped back to H' x W' x C.
Var related_feature(Graph& g, Var affinity_matrix, Var g_out);

// embed -> affinity -> related feature for one collaborator.
Var related_feature_for(Graph& g, Var local, Var collaborative,
                        const RffParams& params);

struct FuseOptions {
  // request_i of the fusion rule; always true during centralized training.
  bool requested = true;
  // When false, a non-requesting platform keeps F_l unscaled instead of the
  // literal p * F_l.
  bool eq9_literal = false;
};

// O = p * F_l + (1 - p) * request * sum_j s_j * F_j^r.
// `related[j]` may be empty only when `weights[j]` is exactly zero;
// otherwise ProtocolError. p and each weight are single-element nodes.
Var fuse(Graph& g, Var local, std::span<const std::optional<Var>> related,
         Var confidence, std::span<const Var> weights,
         const FuseOptions& options);

}  // namespace dcp
