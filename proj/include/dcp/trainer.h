#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "dcp/model.h"
#include "dcp/scene_gen.h"

namespace dcp {

enum class SupervisionTarget { kVictimOnly, kAllPlatforms };

std::string_view to_string(SupervisionTarget target);
SupervisionTarget parse_supervision(std::string_view name);

struct TrainConfig {
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  std::uint64_t seed = 7;
  SupervisionTarget supervision = SupervisionTarget::kVictimOnly;
  unsigned threads = 1;
  // Request threshold for the validation pass of DCP-Net models.
  double validation_threshold = 0.8;
  // Per-epoch checkpoints land in <dir>/epoch_NNN when set.
  std::optional<std::filesystem::path> checkpoint_dir;

  void validate() const;
};

// Adam moments, aligned with ModelParams::for_each order.
struct OptimizerState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;

  static OptimizerState zeros_like(const ModelParams& params);
};

// One bias-corrected Adam update. `grads` follows ModelParams::for_each
// order. A non-finite gradient throws TrainingError naming the block and
// leaves params and state untouched.
void adam_step(ModelParams& params, std::span<const Tensor> grads,
               OptimizerState& state, const TrainConfig& config);

// Summed segmentation loss of the supervised platforms with every
// candidate fused softly (no thresholds, request fixed to 1). For
// random selection, `draw` picks the candidate.
Var centralized_forward(Graph& g, const SceneSample& sample,
                        const ModelParams& params, SupervisionTarget target,
                        std::uint64_t seed = 0, std::uint64_t draw = 0);

// Mean loss and its gradient over a batch, reduced in index order.
struct BatchGradient {
  double loss = 0.0;
  std::vector<Tensor> grads;
};
BatchGradient batch_gradient(std::span<const SceneSample* const> batch,
                             const ModelParams& params,
                             SupervisionTarget target, std::uint64_t seed,
                             std::uint64_t first_draw, unsigned threads);

struct LossPoint {
  std::size_t step = 0;
  double loss = 0.0;
  // Present on the last step of each epoch when validation data is given.
  std::optional<double> val_miou;
};

struct TrainResult {
  ModelParams params;
  std::vector<LossPoint> curve;
};

using ProgressFn = std::function<void(std::size_t epoch, const LossPoint&)>;

TrainResult train(std::span<const SceneSample> train_set,
                  std::span<const SceneSample> validation_set,
                  ModelParams initial, const TrainConfig& config,
                  const ProgressFn& progress = {});

// step,loss,val_miou (empty when no validation ran on that step).
void write_loss_curve(std::ostream& out, std::span<const LossPoint> curve);

}  // namespace dcp
