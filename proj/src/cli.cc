#include "dcp/cli.h"

#include <chrono>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "dcp/errors.h"
#include "dcp/evalbench.h"
#include "dcp/model.h"
#include "dcp/protocol.h"
#include "dcp/scene_gen.h"
#include "dcp/trainer.h"

namespace dcp {

namespace {

struct GenArgs {
  std::string mode = "homo-cis";
  std::size_t samples = 64;
  std::uint64_t seed = 7;
  std::uint64_t first = 0;
  std::string out;
  std::string noise = "gaussian,occlusion";
  double sigma = 0.3;
  double degrade_probability = 0.5;
  std::size_t platforms = 4;
  std::size_t view = 64;
  std::size_t world = 128;
  std::size_t classes = 6;
};

struct TrainArgs {
  std::string dataset;
  std::string val_dataset;
  std::string baseline = "dcp-net";
  std::size_t epochs = 20;
  std::uint64_t seed = 7;
  double lr = 5e-5;
  std::size_t batch_size = 8;
  std::size_t request_dim = 32;
  std::string supervision = "victim_only";
  std::string ckpt;
  std::string out;
  bool epoch_checkpoints = false;
};

struct EvalArgs {
  std::string dataset;
  std::string ckpt;
  std::string baseline;
  double request_threshold = 0.8;
  std::string accounting = "feature_only";
  std::string out;
  std::uint64_t seed = 7;
  double reference_miou = -1.0;
  std::size_t dump_frames = 8;
};

struct SweepArgs {
  std::string kind = "threshold";
  std::string dataset;
  std::string eval_dataset;
  std::string ckpt;
  std::string out;
  std::string accounting = "feature_only";
  std::vector<double> thresholds;
  std::vector<std::size_t> sizes;
  std::size_t epochs = 20;
  double lr = 5e-5;
  std::uint64_t seed = 7;
  double reference_miou = -1.0;
};

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string out;
};

std::vector<NoiseKind> parse_kinds(const std::string& text) {
  std::vector<NoiseKind> kinds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) kinds.push_back(parse_noise_kind(item));
  }
  return kinds;
}

std::vector<SceneSample> load_samples(const std::string& dir) {
  return load_dataset(dir).samples;
}

void write_file(const std::filesystem::path& path,
                const std::function<void(std::ostream&)>& body) {
  std::ofstream f(path);
  if (!f) throw InputError("cannot write " + path.string());
  body(f);
  if (!f) throw InputError("failed writing " + path.string());
}

int cmd_gen(const GenArgs& a, std::ostream& out, unsigned threads) {
  SceneConfig c;
  c.mode = parse_mode(a.mode);
  c.num_platforms = a.platforms;
  c.world.seed = a.seed;
  c.world.view_size = a.view;
  c.world.world_size = a.world;
  c.world.num_classes = a.classes;
  c.noise.kinds = parse_kinds(a.noise);
  c.noise.gaussian_sigma = a.sigma;
  c.noise.degrade_probability = a.degrade_probability;
  Dataset d{c, assemble_mode(c, a.samples, a.first, threads)};
  save_dataset(d, a.out);
  out << "wrote " << d.samples.size() << ' ' << a.mode << " samples to " << a.out
      << '\n';
  return 0;
}

int cmd_train(const TrainArgs& a, std::ostream& out, unsigned threads) {
  const Dataset train_set = load_dataset(a.dataset);
  std::vector<SceneSample> val;
  if (!a.val_dataset.empty()) val = load_samples(a.val_dataset);
  ModelConfig mc;
  mc.kind = parse_baseline(a.baseline);
  mc.num_platforms = train_set.config.num_platforms;
  mc.backbone.num_classes = train_set.config.world.num_classes;
  mc.request_dim = a.request_dim;
  TrainConfig tc;
  tc.epochs = a.epochs;
  tc.seed = a.seed;
  tc.learning_rate = a.lr;
  tc.batch_size = a.batch_size;
  tc.supervision = parse_supervision(a.supervision);
  tc.threads = threads;
  if (a.epoch_checkpoints) tc.checkpoint_dir = std::filesystem::path(a.ckpt) / "epochs";
  const auto start = std::chrono::steady_clock::now();
  TrainResult r = train(train_set.samples, val, ModelParams::init(mc, a.seed), tc,
                        [&](std::size_t epoch, const LossPoint& p) {
                          if (!p.val_miou) return;
                          out << "epoch " << epoch + 1 << " step " << p.step
                              << " loss " << p.loss << " val_miou "
                              << *p.val_miou << '\n';
                        });
  save_checkpoint(r.params, a.ckpt);
  const std::filesystem::path curve_dir = a.out.empty() ? a.ckpt : a.out;
  std::filesystem::create_directories(curve_dir);
  write_file(curve_dir / "loss_curve.csv",
             [&](std::ostream& f) { write_loss_curve(f, r.curve); });
  const double secs = std::chrono::duration<double>(
                          std::chrono::steady_clock::now() - start).count();
  out << "trained " << a.baseline << " for " << a.epochs << " epochs ("
      << r.curve.size() << " steps, " << secs << " s); checkpoint " << a.ckpt
      << '\n';
  return 0;
}

int cmd_eval(const EvalArgs& a, std::ostream& out, unsigned threads) {
  const Dataset d = load_dataset(a.dataset);
  const ModelParams params = load_checkpoint(a.ckpt);
  EvalConfig ec;
  ec.request_threshold = a.request_threshold;
  ec.accounting = parse_comm_accounting(a.accounting);
  ec.threads = threads;
  ec.seed = a.seed;
  if (a.reference_miou >= 0.0) ec.reference_miou = a.reference_miou;
  if (!a.baseline.empty() && parse_baseline(a.baseline) != params.config.kind) {
    throw ConfigError("checkpoint holds " +
                      std::string(to_string(params.config.kind)) +
                      " parameters, not " + a.baseline);
  }
  const EvalResult r = evaluate(d.samples, params, ec);
  const std::vector<MetricsRecord> records{r.record};
  emit_report(records, a.out);
  write_file(std::filesystem::path(a.out) / "ledger.csv",
             [&](std::ostream& f) { r.ledger.write_csv(f); });
  if (a.dump_frames) {
    dump_predictions(d.samples, r.victim_predictions,
                     params.config.backbone.num_classes,
                     std::filesystem::path(a.out) / "frames", a.dump_frames);
  }
  out << r.record.method << ": noisy " << r.record.miou_noisy << " normal "
      << r.record.miou_normal << " avg " << r.record.miou_avg << " mbpf "
      << r.record.mbpf;
  if (r.record.detection_accuracy) out << " detect " << *r.record.detection_accuracy;
  if (r.record.selection_accuracy) out << " select " << *r.record.selection_accuracy;
  out << '\n';
  return 0;
}

int cmd_sweep(const SweepArgs& a, std::ostream& out, unsigned threads) {
  EvalConfig ec;
  ec.accounting = parse_comm_accounting(a.accounting);
  ec.threads = threads;
  ec.seed = a.seed;
  if (a.reference_miou >= 0.0) ec.reference_miou = a.reference_miou;
  std::filesystem::create_directories(a.out);
  if (a.kind == "threshold") {
    const Dataset d = load_dataset(a.dataset);
    const ModelParams params = load_checkpoint(a.ckpt);
    const std::vector<double> grid =
        a.thresholds.empty() ? default_threshold_grid() : a.thresholds;
    const auto rows = sweep_request_threshold(d.samples, params, grid, ec);
    write_file(std::filesystem::path(a.out) / "threshold_sweep.csv",
               [&](std::ostream& f) { write_threshold_csv(f, rows); });
    write_threshold_csv(out, rows);
    return 0;
  }
  if (a.kind == "request-size") {
    const Dataset train_set = load_dataset(a.dataset);
    const std::vector<SceneSample> eval_set =
        load_samples(a.eval_dataset.empty() ? a.dataset : a.eval_dataset);
    ModelConfig mc;
    mc.num_platforms = train_set.config.num_platforms;
    mc.backbone.num_classes = train_set.config.world.num_classes;
    TrainConfig tc;
    tc.epochs = a.epochs;
    tc.learning_rate = a.lr;
    tc.seed = a.seed;
    tc.threads = threads;
    const std::vector<std::size_t> grid =
        a.sizes.empty() ? default_request_size_grid() : a.sizes;
    const auto rows = sweep_request_size(train_set.samples, eval_set, grid, mc, tc, ec);
    write_file(std::filesystem::path(a.out) / "request_size_sweep.csv",
               [&](std::ostream& f) { write_request_size_csv(f, rows); });
    write_request_size_csv(out, rows);
    return 0;
  }
  throw InputError("unknown sweep kind '" + a.kind + "'");
}

int cmd_report(const ReportArgs& a, std::ostream& out) {
  std::vector<MetricsRecord> records;
  for (const std::string& in : a.inputs) {
    std::filesystem::path p(in);
    if (std::filesystem::is_directory(p)) p /= "metrics.json";
    for (MetricsRecord& r : read_metrics_json(p)) records.push_back(std::move(r));
  }
  // CE against the No-Interaction row of the same mode.
  std::map<std::string, double> reference;
  for (const MetricsRecord& r : records) {
    if (r.method == display_name(BaselineKind::kNoInteraction)) {
      reference[r.mode] = r.miou_avg;
    }
  }
  for (MetricsRecord& r : records) {
    auto it = reference.find(r.mode);
    if (it != reference.end()) {
      r.ce = collaboration_efficiency(r.miou_avg / 100.0, it->second / 100.0, r.mbpf);
    }
  }
  emit_report(records, a.out);
  out << "report with " << records.size() << " rows in " << a.out << '\n';
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out,
            std::ostream& err) {
  CLI::App app{"Collaborative perception bench"};
  app.require_subcommand(1);
  unsigned threads = std::max(1u, std::thread::hardware_concurrency());
  app.add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a synthetic multi-platform dataset");
  g->add_option("--mode", gen.mode, "homo-cis | homo-pis | hetero-pis");
  g->add_option("--samples", gen.samples, "Number of samples");
  g->add_option("--seed", gen.seed, "Dataset seed");
  g->add_option("--first", gen.first, "Index of the first sample");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--noise", gen.noise, "Comma list of gaussian, occlusion, blur");
  g->add_option("--sigma", gen.sigma, "Gaussian noise sigma");
  g->add_option("--degrade-prob", gen.degrade_probability, "Victim degradation rate");
  g->add_option("--platforms", gen.platforms, "Platforms per sample");
  g->add_option("--view", gen.view, "View size in pixels");
  g->add_option("--world", gen.world, "World size in pixels");
  g->add_option("--classes", gen.classes, "Number of classes");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model centrally");
  t->add_option("--dataset", tr.dataset, "Training dataset directory")->required();
  t->add_option("--val-dataset", tr.val_dataset, "Validation dataset directory");
  t->add_option("--baseline", tr.baseline, "Fusion policy to train");
  t->add_option("--epochs", tr.epochs, "Epochs");
  t->add_option("--seed", tr.seed, "Initialisation and shuffle seed");
  t->add_option("--lr", tr.lr, "Adam learning rate");
  t->add_option("--batch-size", tr.batch_size, "Samples per step");
  t->add_option("--request-dim", tr.request_dim, "Request vector size");
  t->add_option("--supervision", tr.supervision, "victim_only | all_platforms");
  t->add_option("--ckpt", tr.ckpt, "Checkpoint directory to write")->required();
  t->add_option("--out", tr.out, "Directory for loss_curve.csv");
  t->add_flag("--epoch-checkpoints", tr.epoch_checkpoints,
              "Also keep a checkpoint per epoch under <ckpt>/epochs");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--dataset", ev.dataset, "Dataset directory")->required();
  e->add_option("--ckpt", ev.ckpt, "Checkpoint directory")->required();
  e->add_option("--baseline", ev.baseline, "Expected policy of the checkpoint");
  e->add_option("--request-threshold", ev.request_threshold, "Request threshold");
  e->add_option("--comm-accounting", ev.accounting, "feature_only | total");
  e->add_option("--out", ev.out, "Report directory")->required();
  e->add_option("--seed", ev.seed, "Seed for random selection");
  e->add_option("--reference-miou", ev.reference_miou,
                "No-Interaction average mIoU (percent) for CE");
  e->add_option("--dump-frames", ev.dump_frames, "Frames dumped as PGM/PPM");

  SweepArgs sw;
  auto* s = app.add_subcommand("sweep", "Ablation sweeps");
  s->add_option("--kind", sw.kind, "threshold | request-size");
  s->add_option("--dataset", sw.dataset, "Dataset (training set for request-size)")
      ->required();
  s->add_option("--eval-dataset", sw.eval_dataset, "Evaluation dataset");
  s->add_option("--ckpt", sw.ckpt, "DCP-Net checkpoint (threshold sweep)");
  s->add_option("--out", sw.out, "Output directory")->required();
  s->add_option("--comm-accounting", sw.accounting, "feature_only | total");
  s->add_option("--thresholds", sw.thresholds, "Threshold grid");
  s->add_option("--request-dim", sw.sizes, "Request sizes to sweep");
  s->add_option("--epochs", sw.epochs, "Epochs per retrained model");
  s->add_option("--lr", sw.lr, "Adam learning rate");
  s->add_option("--seed", sw.seed, "Seed");
  s->add_option("--reference-miou", sw.reference_miou,
                "No-Interaction average mIoU (percent) for CE");

  ReportArgs rp;
  auto* r = app.add_subcommand("report", "Merge evaluation outputs into one table");
  r->add_option("--inputs", rp.inputs, "metrics.json files or eval directories")
      ->required();
  r->add_option("--out", rp.out, "Report directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& ex) {
    err << "usage error: " << ex.what() << '\n' << app.help();
    return 2;
  }

  try {
    if (*g) return cmd_gen(gen, out, threads);
    if (*t) return cmd_train(tr, out, threads);
    if (*e) return cmd_eval(ev, out, threads);
    if (*s) {
      if (sw.kind == "threshold" && sw.ckpt.empty()) {
        err << "usage error: --ckpt is required for the threshold sweep\n";
        return 2;
      }
      return cmd_sweep(sw, out, threads);
    }
    if (*r) return cmd_report(rp, out);
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace dcp
