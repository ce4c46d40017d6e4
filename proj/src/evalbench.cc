#include "dcp/evalbench.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>

#include "dcp/errors.h"
#include "dcp/parallel.h"
#include "json.hpp"

namespace dcp {

// ---------------------------------------------------------------------------
// mIoU

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes)
    : k_(num_classes), counts_(num_classes * num_classes, 0) {
  if (num_classes == 0) throw InputError("confusion matrix needs K >= 1");
}

void ConfusionMatrix::add(const ClassMask& prediction, const ClassMask& target) {
  if (prediction.height != target.height || prediction.width != target.width ||
      prediction.size() != target.size()) {
    throw DimensionError("prediction " + std::to_string(prediction.height) + "x" +
                         std::to_string(prediction.width) + " vs target " +
                         std::to_string(target.height) + "x" +
                         std::to_string(target.width));
  }
  for (std::size_t i = 0; i < target.size(); ++i) {
    const std::size_t t = target.labels[i], p = prediction.labels[i];
    if (t >= k_ || p >= k_) {
      throw InputError("class id " + std::to_string(std::max(t, p)) +
                       " out of range for K=" + std::to_string(k_));
    }
    ++counts_[t * k_ + p];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw DimensionError("merging confusion matrices of different K");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t n = 0;
  for (auto c : counts_) n += c;
  return n;
}

double ConfusionMatrix::miou() const {
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < k_; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < k_; ++j) {
      row += counts_[c * k_ + j];
      col += counts_[j * k_ + c];
    }
    const std::uint64_t tp = counts_[c * k_ + c];
    const std::uint64_t uni = row + col - tp;
    if (uni == 0) continue;
    sum += static_cast<double>(tp) / static_cast<double>(uni);
    ++present;
  }
  return present ? sum / static_cast<double>(present) : 0.0;
}

double miou(std::span<const ClassMask> predictions,
            std::span<const ClassMask> targets, std::size_t num_classes) {
  if (predictions.size() != targets.size()) {
    throw DimensionError("miou: " + std::to_string(predictions.size()) +
                         " predictions for " + std::to_string(targets.size()) +
                         " targets");
  }
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < targets.size(); ++i) cm.add(predictions[i], targets[i]);
  return cm.miou();
}

std::optional<double> collaboration_efficiency(double miou_collab,
                                               double miou_baseline,
                                               double mbpf) {
  if (!(mbpf > 0.0)) return std::nullopt;
  return (miou_collab - miou_baseline) * 100.0 / mbpf;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

struct FrameOutcome {
  ClassMask victim_prediction;
  std::vector<ClassMask> predictions;
  FrameLog log;
  CommLedger ledger;
};

FrameOutcome run_one(const SceneSample& sample, const ModelParams& params,
                     const EvalConfig& config) {
  const PlatformId victim = static_cast<PlatformId>(sample.victim);
  FrameResult r;
  if (params.config.kind == BaselineKind::kDcpNet) {
    ProtocolConfig pc;
    pc.request_threshold = config.request_threshold;
    pc.eq9_literal = config.eq9_literal;
    pc.only_requester = victim;
    r = run_frame(sample, params, pc);
  } else {
    r = run_baseline_frame(sample, params, victim, config.seed);
  }
  FrameOutcome out;
  out.victim_prediction = r.predictions[victim];
  out.log.requested = r.states[victim].requested;
  out.log.supporters = r.states[victim].supporters;
  out.log.confidence = r.states[victim].confidence;
  out.predictions = std::move(r.predictions);
  out.ledger = std::move(r.ledger);
  return out;
}

bool all_cis(std::span<const SceneSample> samples) {
  return std::all_of(samples.begin(), samples.end(), [](const SceneSample& s) {
    return s.mode == ExperimentMode::kHomoCis;
  });
}

}  // namespace

EvalResult evaluate(std::span<const SceneSample> samples,
                    const ModelParams& params, const EvalConfig& config) {
  if (samples.empty()) throw InputError("evaluate: no samples");
  std::vector<FrameOutcome> frames(samples.size());
  parallel_for(samples.size(), config.threads, [&](std::size_t f) {
    frames[f] = run_one(samples[f], params, config);
  });

  const std::size_t k = params.config.backbone.num_classes;
  const std::size_t n = params.config.num_platforms;
  ConfusionMatrix noisy(k), normal(k);
  std::vector<ConfusionMatrix> platforms(n, ConfusionMatrix(k));
  EvalResult out;
  for (std::size_t f = 0; f < samples.size(); ++f) {
    const SceneSample& s = samples[f];
    const bool degraded = s.degraded[s.victim];
    (degraded ? noisy : normal).add(frames[f].victim_prediction, s.masks[s.victim]);
    for (std::size_t i = 0; i < n; ++i) {
      platforms[i].add(frames[f].predictions[i], s.masks[i]);
    }
    out.ledger.append(frames[f].ledger);
    out.logs.push_back(std::move(frames[f].log));
    out.victim_predictions.push_back(std::move(frames[f].victim_prediction));
  }

  MetricsRecord& rec = out.record;
  rec.type = std::string(fusion_type(params.config.kind));
  rec.method = std::string(display_name(params.config.kind));
  rec.mode = std::string(to_string(samples.front().mode));
  rec.noisy_frames = static_cast<std::size_t>(
      std::count_if(samples.begin(), samples.end(),
                    [](const SceneSample& s) { return bool(s.degraded[s.victim]); }));
  rec.normal_frames = samples.size() - rec.noisy_frames;
  rec.miou_noisy = 100.0 * noisy.miou();
  rec.miou_normal = 100.0 * normal.miou();
  rec.miou_avg = (rec.miou_noisy * static_cast<double>(rec.noisy_frames) +
                  rec.miou_normal * static_cast<double>(rec.normal_frames)) /
                 static_cast<double>(samples.size());
  for (const ConfusionMatrix& cm : platforms) rec.platform_miou.push_back(100.0 * cm.miou());
  rec.mbpf = mbpf(out.ledger, samples.size(), config.accounting);
  rec.comm_accounting = std::string(to_string(config.accounting));
  if (config.reference_miou) {
    rec.ce = collaboration_efficiency(rec.miou_avg / 100.0,
                                      *config.reference_miou / 100.0, rec.mbpf);
  }
  if (params.config.kind == BaselineKind::kDcpNet) {
    rec.request_threshold = config.request_threshold;
    if (all_cis(samples)) {
      const SelectionAccuracy acc = selection_accuracy(out.logs, samples);
      rec.detection_accuracy = acc.detection;
      if (acc.degraded_frames) rec.selection_accuracy = acc.selection;
    }
  }
  return out;
}

MetricsRecord run_baseline(BaselineKind kind, std::span<const SceneSample> samples,
                           const ModelParams& params, const EvalConfig& config) {
  if (params.config.kind != kind) {
    throw ConfigError("parameters were built for " +
                      std::string(to_string(params.config.kind)) + ", not " +
                      std::string(to_string(kind)));
  }
  return evaluate(samples, params, config).record;
}

double validation_miou(std::span<const SceneSample> samples,
                       const ModelParams& params, double request_threshold,
                       unsigned threads) {
  EvalConfig config;
  config.request_threshold = request_threshold;
  config.threads = threads;
  const std::size_t k = params.config.backbone.num_classes;
  std::vector<ClassMask> preds(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t f) {
    preds[f] = run_one(samples[f], params, config).victim_prediction;
  });
  ConfusionMatrix cm(k);
  for (std::size_t f = 0; f < samples.size(); ++f) {
    cm.add(preds[f], samples[f].masks[samples[f].victim]);
  }
  return cm.miou();
}

SelectionAccuracy selection_accuracy(std::span<const FrameLog> logs,
                                     std::span<const SceneSample> samples) {
  if (logs.size() != samples.size()) {
    throw InputError("selection_accuracy: " + std::to_string(logs.size()) +
                     " logs for " + std::to_string(samples.size()) + " samples");
  }
  if (samples.empty()) throw InputError("selection_accuracy: no samples");
  if (!all_cis(samples)) {
    throw InputError("selection accuracy needs a homo-cis dataset");
  }
  std::size_t detected = 0, selected = 0, degraded = 0;
  for (std::size_t f = 0; f < samples.size(); ++f) {
    const SceneSample& s = samples[f];
    const bool d = s.degraded[s.victim];
    if (logs[f].requested == d) ++detected;
    if (d) {
      ++degraded;
      if (s.clean_twin &&
          std::find(logs[f].supporters.begin(), logs[f].supporters.end(),
                    *s.clean_twin) != logs[f].supporters.end()) {
        ++selected;
      }
    }
  }
  SelectionAccuracy acc;
  acc.degraded_frames = degraded;
  acc.detection = static_cast<double>(detected) / static_cast<double>(samples.size());
  acc.selection =
      degraded ? static_cast<double>(selected) / static_cast<double>(degraded) : 0.0;
  return acc;
}

// ---------------------------------------------------------------------------
// Sweeps

std::vector<double> default_threshold_grid() {
  std::vector<double> grid;
  for (int i = 0; i <= 10; ++i) grid.push_back(i / 10.0);
  return grid;
}

std::vector<ThresholdRow> sweep_request_threshold(
    std::span<const SceneSample> samples, const ModelParams& params,
    std::span<const double> grid, const EvalConfig& config) {
  if (params.config.kind != BaselineKind::kDcpNet) {
    throw ConfigError("threshold sweep needs DCP-Net parameters");
  }
  for (double t : grid) {
    if (!(t >= 0.0 && t <= 1.0)) {
      throw ConfigError("threshold " + std::to_string(t) + " outside [0, 1]");
    }
  }
  EvalConfig base = config;
  if (!base.reference_miou) {
    EvalConfig local = config;
    local.request_threshold = 0.0;
    base.reference_miou = evaluate(samples, params, local).record.miou_avg;
  }
  std::vector<ThresholdRow> rows;
  for (double t : grid) {
    EvalConfig c = base;
    c.request_threshold = t;
    const MetricsRecord rec = evaluate(samples, params, c).record;
    rows.push_back(ThresholdRow{t, rec.miou_avg, rec.mbpf, rec.ce});
  }
  return rows;
}

std::vector<std::size_t> default_request_size_grid() { return {2, 8, 32, 128}; }

std::vector<RequestSizeRow> sweep_request_size(
    std::span<const SceneSample> train_set, std::span<const SceneSample> eval_set,
    std::span<const std::size_t> grid, const ModelConfig& model,
    const TrainConfig& train_config, const EvalConfig& eval_config) {
  for (std::size_t r : grid) {
    if (r == 0 || r > model.qk_dim) {
      throw ConfigError("request size " + std::to_string(r) +
                        " must be in [1, qk_dim=" + std::to_string(model.qk_dim) +
                        "]");
    }
  }
  std::vector<RequestSizeRow> rows;
  for (std::size_t r : grid) {
    ModelConfig mc = model;
    mc.kind = BaselineKind::kDcpNet;
    mc.request_dim = r;
    mc.allow_uncompressed_request = 2 * r > mc.qk_dim;
    TrainConfig tc = train_config;
    tc.checkpoint_dir.reset();
    TrainResult trained =
        train(train_set, {}, ModelParams::init(mc, train_config.seed), tc);
    const MetricsRecord rec = evaluate(eval_set, trained.params, eval_config).record;
    rows.push_back(RequestSizeRow{r, rec.miou_avg, rec.mbpf, rec.ce, 4 * r});
  }
  return rows;
}

namespace {

std::string fmt(double v, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

std::string fmt(const std::optional<double>& v, int precision) {
  return v ? fmt(*v, precision) : std::string("-");
}

}  // namespace

void write_threshold_csv(std::ostream& out, std::span<const ThresholdRow> rows) {
  out << "threshold,avg_miou,mbpf,ce\n";
  for (const ThresholdRow& r : rows) {
    out << fmt(r.threshold, 2) << ',' << fmt(r.avg_miou, 4) << ','
        << fmt(r.mbpf, 6) << ',' << fmt(r.ce, 4) << '\n';
  }
}

void write_request_size_csv(std::ostream& out,
                            std::span<const RequestSizeRow> rows) {
  out << "request_dim,avg_miou,mbpf,ce,request_bytes\n";
  for (const RequestSizeRow& r : rows) {
    out << r.request_dim << ',' << fmt(r.avg_miou, 4) << ',' << fmt(r.mbpf, 6)
        << ',' << fmt(r.ce, 4) << ',' << r.request_bytes << '\n';
  }
}

// ---------------------------------------------------------------------------
// Report

namespace {

using nlohmann::json;

json optional_json(const std::optional<double>& v) {
  return v ? json(*v) : json(nullptr);
}

std::optional<double> optional_from(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

json to_json(const MetricsRecord& r) {
  return json{{"type", r.type},
              {"method", r.method},
              {"mode", r.mode},
              {"miou_noisy", r.miou_noisy},
              {"miou_normal", r.miou_normal},
              {"miou_avg", r.miou_avg},
              {"noisy_frames", r.noisy_frames},
              {"normal_frames", r.normal_frames},
              {"platform_miou", r.platform_miou},
              {"mbpf", r.mbpf},
              {"comm_accounting", r.comm_accounting},
              {"ce", optional_json(r.ce)},
              {"detection_accuracy", optional_json(r.detection_accuracy)},
              {"selection_accuracy", optional_json(r.selection_accuracy)},
              {"request_threshold", optional_json(r.request_threshold)}};
}

MetricsRecord from_json(const json& j) {
  MetricsRecord r;
  r.type = j.at("type").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.mode = j.at("mode").get<std::string>();
  r.miou_noisy = j.at("miou_noisy").get<double>();
  r.miou_normal = j.at("miou_normal").get<double>();
  r.miou_avg = j.at("miou_avg").get<double>();
  r.noisy_frames = j.at("noisy_frames").get<std::size_t>();
  r.normal_frames = j.at("normal_frames").get<std::size_t>();
  r.platform_miou = j.at("platform_miou").get<std::vector<double>>();
  r.mbpf = j.at("mbpf").get<double>();
  r.comm_accounting = j.at("comm_accounting").get<std::string>();
  r.ce = optional_from(j, "ce");
  r.detection_accuracy = optional_from(j, "detection_accuracy");
  r.selection_accuracy = optional_from(j, "selection_accuracy");
  r.request_threshold = optional_from(j, "request_threshold");
  return r;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  return out;
}

}  // namespace

void emit_report(std::span<const MetricsRecord> records,
                 const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw InputError("cannot create report dir " + dir.string() + ": " + ec.message());
  json doc = json::array();
  for (const MetricsRecord& r : records) doc.push_back(to_json(r));
  {
    std::ofstream out = open_out(dir / "metrics.json");
    out << json{{"records", doc}}.dump(2) << '\n';
    if (!out) throw InputError("failed writing metrics.json");
  }
  std::ofstream csv = open_out(dir / "tables.csv");
  csv << kTablesHeader << '\n';
  for (const MetricsRecord& r : records) {
    const bool free = r.mbpf == 0.0;
    csv << r.type << ',' << r.method << ',' << fmt(r.miou_noisy, 2) << ','
        << fmt(r.miou_normal, 2) << ',' << fmt(r.miou_avg, 2) << ','
        << (free ? std::string("-") : fmt(r.mbpf, 3)) << ',' << fmt(r.ce, 2)
        << '\n';
  }
  if (!csv) throw InputError("failed writing tables.csv");
}

std::vector<MetricsRecord> read_metrics_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  try {
    const json doc = json::parse(in);
    std::vector<MetricsRecord> out;
    for (const json& j : doc.at("records")) out.push_back(from_json(j));
    return out;
  } catch (const json::exception& e) {
    throw FormatError("malformed metrics.json: " + std::string(e.what()));
  }
}

// ---------------------------------------------------------------------------
// Portable images

void write_portable_image(const std::filesystem::path& path,
                          const PortableImage& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw InputError("portable images have 1 or 3 channels");
  }
  if (image.pixels.size() != image.width * image.height * image.channels) {
    throw DimensionError("pixel buffer does not match image size");
  }
  std::ofstream out = open_out(path);
  out << (image.channels == 1 ? "P5" : "P6") << '\n'
      << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw InputError("failed writing " + path.string());
}

PortableImage read_portable_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  std::string magic;
  in >> magic;
  PortableImage img;
  if (magic == "P5") {
    img.channels = 1;
  } else if (magic == "P6") {
    img.channels = 3;
  } else {
    throw FormatError("not a binary PGM/PPM: " + path.string());
  }
  auto next_int = [&]() -> long long {
    for (;;) {
      in >> std::ws;
      if (in.peek() == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      long long v = -1;
      in >> v;
      if (!in || v < 0) throw FormatError("bad PNM header in " + path.string());
      return v;
    }
  };
  img.width = static_cast<std::size_t>(next_int());
  img.height = static_cast<std::size_t>(next_int());
  const long long maxval = next_int();
  if (maxval != 255) throw FormatError("only maxval 255 is supported");
  in.get();
  img.pixels.resize(img.width * img.height * img.channels);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
    throw FormatError("truncated pixel data in " + path.string());
  }
  return img;
}

PortableImage mask_to_pgm(const ClassMask& mask, std::size_t num_classes) {
  PortableImage img{mask.width, mask.height, 1, {}};
  const double step = num_classes > 1 ? 255.0 / static_cast<double>(num_classes - 1) : 0.0;
  img.pixels.reserve(mask.size());
  for (std::uint8_t c : mask.labels) {
    img.pixels.push_back(static_cast<std::uint8_t>(
        std::lround(std::min(255.0, c * step))));
  }
  return img;
}

PortableImage mask_to_ppm(const ClassMask& mask) {
  PortableImage img{mask.width, mask.height, 3, {}};
  img.pixels.reserve(mask.size() * 3);
  for (std::uint8_t c : mask.labels) {
    for (float v : class_color(c)) {
      img.pixels.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
    }
  }
  return img;
}

PortableImage image_to_ppm(const Image& image) {
  if (image.channels != 3) throw InputError("image_to_ppm needs 3 channels");
  PortableImage img{image.width, image.height, 3, {}};
  img.pixels.reserve(image.data.size());
  for (float v : image.data) {
    img.pixels.push_back(static_cast<std::uint8_t>(
        std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  }
  return img;
}

void dump_predictions(std::span<const SceneSample> samples,
                      std::span<const ClassMask> predictions,
                      std::size_t num_classes, const std::filesystem::path& dir,
                      std::size_t max_frames) {
  if (samples.size() != predictions.size()) {
    throw InputError("dump_predictions: sample/prediction count mismatch");
  }
  std::filesystem::create_directories(dir);
  const std::size_t count = std::min(max_frames, samples.size());
  for (std::size_t f = 0; f < count; ++f) {
    const SceneSample& s = samples[f];
    char stem[48];
    std::snprintf(stem, sizeof stem, "frame_%06llu",
                  static_cast<unsigned long long>(s.index));
    const std::string base = stem;
    write_portable_image(dir / (base + "_view.ppm"), image_to_ppm(s.views[s.victim]));
    write_portable_image(dir / (base + "_target.ppm"), mask_to_ppm(s.masks[s.victim]));
    write_portable_image(dir / (base + "_pred.ppm"), mask_to_ppm(predictions[f]));
    write_portable_image(dir / (base + "_pred.pgm"),
                         mask_to_pgm(predictions[f], num_classes));
  }
}

}  // namespace dcp
