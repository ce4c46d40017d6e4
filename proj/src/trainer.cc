#include "dcp/trainer.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <string>

#include "dcp/errors.h"
#include "dcp/evalbench.h"
#include "dcp/parallel.h"
#include "dcp/protocol.h"
#include "dcp/rng.h"

namespace dcp {

std::string_view to_string(SupervisionTarget target) {
  return target == SupervisionTarget::kVictimOnly ? "victim_only"
                                                  : "all_platforms";
}

SupervisionTarget parse_supervision(std::string_view name) {
  if (name == "victim_only") return SupervisionTarget::kVictimOnly;
  if (name == "all_platforms") return SupervisionTarget::kAllPlatforms;
  throw InputError("unknown supervision target '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning rate must be positive");
  }
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in (0, 1)");
  }
  if (!(epsilon > 0.0)) throw ConfigError("Adam epsilon must be positive");
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
}

OptimizerState OptimizerState::zeros_like(const ModelParams& params) {
  OptimizerState s;
  params.for_each([&s](const std::string&, const Tensor& t) {
    s.m.emplace_back(t.shape());
    s.v.emplace_back(t.shape());
  });
  return s;
}

void adam_step(ModelParams& params, std::span<const Tensor> grads,
               OptimizerState& state, const TrainConfig& config) {
  std::vector<std::string> names;
  std::vector<Tensor*> tensors;
  params.for_each([&](const std::string& name, Tensor& t) {
    names.push_back(name);
    tensors.push_back(&t);
  });
  if (grads.size() != tensors.size() || state.m.size() != tensors.size() ||
      state.v.size() != tensors.size()) {
    throw DimensionError("adam_step: " + std::to_string(grads.size()) +
                         " gradients and " + std::to_string(state.m.size()) +
                         " moments for " + std::to_string(tensors.size()) +
                         " parameter blocks");
  }
  for (std::size_t b = 0; b < tensors.size(); ++b) {
    if (grads[b].shape() != tensors[b]->shape() ||
        state.m[b].shape() != tensors[b]->shape() ||
        state.v[b].shape() != tensors[b]->shape()) {
      throw DimensionError("adam_step: shape mismatch for " + names[b]);
    }
    if (!grads[b].all_finite()) {
      throw TrainingError("non-finite gradient in parameter block " + names[b] +
                          " at step " + std::to_string(state.step + 1));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t b = 0; b < tensors.size(); ++b) {
    auto p = tensors[b]->data();
    auto g = grads[b].data();
    auto m = state.m[b].data();
    auto v = state.v[b].data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      const double mh = m[i] / c1;
      const double vh = v[i] / c2;
      p[i] -= config.learning_rate * mh / (std::sqrt(vh) + config.epsilon);
    }
  }
}

namespace {

Var platform_output(Graph& g, std::span<const Var> features,
                    std::span<const QueryKey> qks, std::size_t i,
                    const ModelParams& params, std::uint64_t seed,
                    std::uint64_t draw) {
  const std::size_t n = features.size();
  switch (params.config.kind) {
    case BaselineKind::kNoInteraction:
      return features[i];
    case BaselineKind::kConcatAll:
      return concat_all_fuse(g, features, i, *params.concat);
    case BaselineKind::kAuxViewAttention:
      return aux_attention_fuse(g, features, i, *params.attention);
    case BaselineKind::kRandomSelection: {
      const std::size_t j = random_candidate(n, i, seed, draw);
      return random_selection_fuse(g, features[i], features[j]);
    }
    case BaselineKind::kDcpNet:
      break;
  }
  const SmimParams& smim = *params.smim;
  const Var p = self_confidence(g, qks[i].q, qks[i].k);
  const Var r = encode_request(g, features[i], smim);
  const Var w_alpha = g.param(smim.w_alpha);
  std::vector<Var> relevance;
  std::vector<std::optional<Var>> related;
  for (std::size_t j = 0; j < n; ++j) {
    if (j == i) continue;
    relevance.push_back(candidate_relevance(g, r, qks[j].k, w_alpha));
    related.push_back(related_feature_for(g, features[i], features[j], *params.rff));
  }
  const Var scores = softmax(g, concat(g, relevance, 1), 1);
  std::vector<Var> weights;
  for (std::size_t c = 0; c < relevance.size(); ++c) {
    weights.push_back(pick(g, scores, c));
  }
  return fuse(g, features[i], related, p, weights, FuseOptions{true, false});
}

}  // namespace

Var centralized_forward(Graph& g, const SceneSample& sample,
                        const ModelParams& params, SupervisionTarget target,
                        std::uint64_t seed, std::uint64_t draw) {
  const std::size_t n = sample.num_platforms();
  if (n != params.config.num_platforms) {
    throw InputError("sample has " + std::to_string(n) +
                     " platforms, model expects " +
                     std::to_string(params.config.num_platforms));
  }
  std::vector<std::size_t> supervised;
  if (target == SupervisionTarget::kVictimOnly) {
    supervised.push_back(sample.victim);
  } else {
    supervised.resize(n);
    std::iota(supervised.begin(), supervised.end(), std::size_t{0});
  }
  const bool needs_all = params.config.kind != BaselineKind::kNoInteraction;
  std::vector<Var> features(n);
  std::vector<QueryKey> qks(n);
  for (std::size_t i = 0; i < n; ++i) {
    const bool used = needs_all || std::find(supervised.begin(), supervised.end(),
                                             i) != supervised.end();
    if (!used) continue;
    features[i] = encode_view(g, g.constant(sample.views[i].to_tensor()),
                              params.encoder);
    if (params.smim) qks[i] = encode_query_key(g, features[i], *params.smim);
  }
  std::optional<Var> loss;
  for (std::size_t i : supervised) {
    const Var out = platform_output(g, features, qks, i, params, seed,
                                    draw * n + i);
    const Var logits = decode_segmentation(g, out, params.decoder);
    const Var ce = cross_entropy(g, logits, sample.masks[i]);
    loss = loss ? add(g, *loss, ce) : ce;
  }
  return *loss;
}

BatchGradient batch_gradient(std::span<const SceneSample* const> batch,
                             const ModelParams& params,
                             SupervisionTarget target, std::uint64_t seed,
                             std::uint64_t first_draw, unsigned threads) {
  if (batch.empty()) throw InputError("batch_gradient: empty batch");
  std::vector<const Tensor*> blocks;
  params.for_each([&](const std::string&, const Tensor& t) { blocks.push_back(&t); });

  std::vector<double> losses(batch.size());
  std::vector<std::vector<Tensor>> per_sample(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t s) {
    Graph g;
    const Var loss = centralized_forward(g, *batch[s], params, target, seed,
                                         first_draw + s);
    g.backward(loss);
    losses[s] = g.value(loss).item();
    auto& grads = per_sample[s];
    grads.reserve(blocks.size());
    for (const Tensor* t : blocks) {
      const Tensor* gt = g.grad_of(*t);
      grads.push_back(gt ? *gt : Tensor(t->shape()));
    }
  });

  BatchGradient out;
  out.grads = std::move(per_sample[0]);
  out.loss = losses[0];
  for (std::size_t s = 1; s < batch.size(); ++s) {
    out.loss += losses[s];
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      auto acc = out.grads[b].data();
      auto add = per_sample[s][b].data();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += add[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.loss *= inv;
  for (Tensor& t : out.grads) {
    for (double& v : t.data()) v *= inv;
  }
  return out;
}

TrainResult train(std::span<const SceneSample> train_set,
                  std::span<const SceneSample> validation_set,
                  ModelParams initial, const TrainConfig& config,
                  const ProgressFn& progress) {
  config.validate();
  TrainResult result{std::move(initial), {}};
  if (config.epochs == 0) return result;
  if (train_set.empty()) throw InputError("train: empty training set");

  OptimizerState state = OptimizerState::zeros_like(result.params);
  std::vector<std::size_t> order(train_set.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto rng = make_rng(config.seed, streams::kShuffle, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<const SceneSample*> batch;
      for (std::size_t k = start; k < end; ++k) batch.push_back(&train_set[order[k]]);
      const BatchGradient bg =
          batch_gradient(batch, result.params, config.supervision, config.seed,
                         epoch * order.size() + start, config.threads);
      if (!std::isfinite(bg.loss)) {
        throw TrainingError("non-finite loss at step " + std::to_string(step + 1));
      }
      adam_step(result.params, bg.grads, state, config);
      LossPoint point{++step, bg.loss, std::nullopt};
      if (end == order.size() && !validation_set.empty()) {
        point.val_miou = validation_miou(validation_set, result.params,
                                         config.validation_threshold,
                                         config.threads);
      }
      result.curve.push_back(point);
      if (progress) progress(epoch, point);
    }
    if (config.checkpoint_dir) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03zu", epoch + 1);
      save_checkpoint(result.params, *config.checkpoint_dir / name);
    }
  }
  return result;
}

void write_loss_curve(std::ostream& out, std::span<const LossPoint> curve) {
  out << "step,loss,val_miou\n";
  char buf[64];
  for (const LossPoint& p : curve) {
    std::snprintf(buf, sizeof buf, "%.9g", p.loss);
    out << p.step << ',' << buf << ',';
    if (p.val_miou) {
      std::snprintf(buf, sizeof buf, "%.9g", *p.val_miou);
      out << buf;
    }
    out << '\n';
  }
}

}  // namespace dcp
