#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dcp/model.h"
#include "dcp/protocol.h"
#include "dcp/scene_gen.h"
#include "dcp/trainer.h"

namespace dcp {

// Pooled K x K confusion counts, rows = target, columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes);

  // Throws DimensionError on a shape mismatch and InputError on ids >= K.
  void add(const ClassMask& prediction, const ClassMask& target);
  void merge(const ConfusionMatrix& other);

  std::size_t num_classes() const { return k_; }
  std::uint64_t at(std::size_t target, std::size_t predicted) const {
    return counts_[target * k_ + predicted];
  }
  std::uint64_t total() const;
  // Mean IoU over classes present in targets or predictions; 0 when empty.
  double miou() const;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

double miou(std::span<const ClassMask> predictions,
            std::span<const ClassMask> targets, std::size_t num_classes);

// 100 * (collab - baseline) / mbpf with mIoU as fractions; empty when
// mbpf is 0.
std::optional<double> collaboration_efficiency(double miou_collab,
                                               double miou_baseline,
                                               double mbpf);

struct MetricsRecord {
  // individual, centralized or distributed.
  std::string type;
  std::string method;
  std::string mode;
  // Percentages. Noisy frames are those whose victim view was degraded.
  double miou_noisy = 0.0;
  double miou_normal = 0.0;
  double miou_avg = 0.0;
  std::size_t noisy_frames = 0;
  std::size_t normal_frames = 0;
  // Every platform's own prediction, pooled over frames.
  std::vector<double> platform_miou;
  double mbpf = 0.0;
  std::string comm_accounting = "feature_only";
  std::optional<double> ce;
  std::optional<double> detection_accuracy;
  std::optional<double> selection_accuracy;
  std::optional<double> request_threshold;

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

struct EvalConfig {
  double request_threshold = 0.8;
  CommAccounting accounting = CommAccounting::kFeatureOnly;
  unsigned threads = 1;
  // Seeds the random-selection draws.
  std::uint64_t seed = 7;
  bool eq9_literal = false;
  // No-Interaction average mIoU (percent) that CE is measured against.
  std::optional<double> reference_miou;
};

// What the victim platform did in one frame.
struct FrameLog {
  bool requested = false;
  std::vector<PlatformId> supporters;
  double confidence = 0.0;
};

struct EvalResult {
  MetricsRecord record;
  std::vector<FrameLog> logs;
  std::vector<ClassMask> victim_predictions;
  CommLedger ledger;
};

// Runs `params` (whose kind selects the policy) over every sample with the
// victim as the evaluated platform.
EvalResult evaluate(std::span<const SceneSample> samples,
                    const ModelParams& params, const EvalConfig& config);

// evaluate() after checking that params were built for `kind`.
MetricsRecord run_baseline(BaselineKind kind, std::span<const SceneSample> samples,
                           const ModelParams& params, const EvalConfig& config);

// Victim mIoU in [0, 1], used as the validation signal during training.
double validation_miou(std::span<const SceneSample> samples,
                       const ModelParams& params, double request_threshold,
                       unsigned threads);

struct SelectionAccuracy {
  double detection = 0.0;
  double selection = 0.0;
  std::size_t degraded_frames = 0;
};

// Throws InputError unless every sample is Homo-CIS, or on a size mismatch.
SelectionAccuracy selection_accuracy(std::span<const FrameLog> logs,
                                     std::span<const SceneSample> samples);

struct ThresholdRow {
  double threshold = 0.0;
  double avg_miou = 0.0;
  double mbpf = 0.0;
  std::optional<double> ce;
};

std::vector<double> default_threshold_grid();

// One inference pass per threshold with shared params. CE is measured
// against config.reference_miou, or against local-only decoding with the
// same params when that is unset.
std::vector<ThresholdRow> sweep_request_threshold(
    std::span<const SceneSample> samples, const ModelParams& params,
    std::span<const double> grid, const EvalConfig& config);

struct RequestSizeRow {
  std::size_t request_dim = 0;
  double avg_miou = 0.0;
  double mbpf = 0.0;
  std::optional<double> ce;
  std::size_t request_bytes = 0;
};

std::vector<std::size_t> default_request_size_grid();

// Retrains DCP-Net once per request size. Throws ConfigError for sizes
// above qk_dim before any training starts.
std::vector<RequestSizeRow> sweep_request_size(
    std::span<const SceneSample> train_set, std::span<const SceneSample> eval_set,
    std::span<const std::size_t> grid, const ModelConfig& model,
    const TrainConfig& train_config, const EvalConfig& eval_config);

void write_threshold_csv(std::ostream& out, std::span<const ThresholdRow> rows);
void write_request_size_csv(std::ostream& out,
                            std::span<const RequestSizeRow> rows);

// metrics.json and tables.csv in `dir`.
void emit_report(std::span<const MetricsRecord> records,
                 const std::filesystem::path& dir);
std::vector<MetricsRecord> read_metrics_json(const std::filesystem::path& path);

inline constexpr const char* kTablesHeader =
    "Type,Method,Noisy,Normal,Avg.,Comm. Cost,CE";

// Binary PGM (P5) / PPM (P6) with maxval 255.
struct PortableImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;  // 1 for PGM, 3 for PPM
  std::vector<std::uint8_t> pixels;
  friend bool operator==(const PortableImage&, const PortableImage&) = default;
};

void write_portable_image(const std::filesystem::path& path,
                          const PortableImage& image);
PortableImage read_portable_image(const std::filesystem::path& path);

// Class ids scaled to grey levels, and class colours.
PortableImage mask_to_pgm(const ClassMask& mask, std::size_t num_classes);
PortableImage mask_to_ppm(const ClassMask& mask);
PortableImage image_to_ppm(const Image& image);

// Per-frame view, target and prediction images under `dir`.
void dump_predictions(std::span<const SceneSample> samples,
                      std::span<const ClassMask> predictions,
                      std::size_t num_classes, const std::filesystem::path& dir,
                      std::size_t max_frames = 16);

}  // namespace dcp
