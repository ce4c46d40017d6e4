#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "dcp/cli.h"
#include "dcp/evalbench.h"
#include "dcp/scene_gen.h"
#include "support.h"

using namespace dcp;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::initializer_list<std::string> args) {
  std::vector<std::string> owned = {"dcpbench"};
  owned.insert(owned.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : owned) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string first_line(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  return line;
}

}  // namespace

TEST_CASE("usage errors and help") {
  CHECK(cli({}).code == 2);
  CHECK(cli({"frobnicate"}).code == 2);
  const Run missing = cli({"gen"});
  CHECK(missing.code == 2);
  CHECK(missing.err.find("--out") != std::string::npos);
  const Run help = cli({"--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("gen") != std::string::npos);
  CHECK(cli({"sweep", "--dataset", "x", "--out", "y"}).code == 2);
}

TEST_CASE("failing commands exit with 1") {
  const auto dir = dcp::testing::scratch_dir("cli_fail");
  const Run r = cli({"eval", "--dataset", (dir / "none").string(), "--ckpt",
                     (dir / "none").string(), "--out", (dir / "o").string()});
  CHECK(r.code == 1);
  CHECK(r.err.starts_with("error: "));
  CHECK(cli({"gen", "--mode", "sideways", "--out", (dir / "g").string()}).code == 1);
}

TEST_CASE("gen is deterministic") {
  const auto dir = dcp::testing::scratch_dir("cli_gen");
  for (const char* name : {"a", "b"}) {
    REQUIRE(cli({"gen", "--samples", "5", "--view", "16", "--world", "32", "--platforms", "3",
                 "--out", (dir / name).string()})
                .code == 0);
  }
  const Dataset a = load_dataset(dir / "a"), b = load_dataset(dir / "b");
  CHECK(a.samples == b.samples);
  CHECK(a.samples.size() == 5);
  CHECK(a.config.num_platforms == 3);
}

TEST_CASE("gen, train, eval, sweep and report end to end") {
  const auto dir = dcp::testing::scratch_dir("cli_e2e");
  const std::string data = (dir / "data").string();
  REQUIRE(cli({"--threads", "2", "gen", "--samples", "4", "--view", "16", "--world", "32",
               "--platforms", "2", "--classes", "3", "--out", data})
              .code == 0);

  for (const char* policy : {"no-interaction", "dcp-net"}) {
    const std::string ckpt = (dir / policy).string();
    const Run t = cli({"train", "--dataset", data, "--val-dataset", data, "--baseline", policy,
                       "--epochs", "1", "--batch-size", "2", "--lr", "1e-3", "--ckpt", ckpt});
    REQUIRE_MESSAGE(t.code == 0, t.err);
    CHECK(first_line(dir / policy / "loss_curve.csv") == "step,loss,val_miou");
    const Run e = cli({"eval", "--dataset", data, "--ckpt", ckpt, "--baseline", policy,
                       "--out", (dir / (std::string(policy) + "_eval")).string()});
    REQUIRE_MESSAGE(e.code == 0, e.err);
  }
  const auto ni = read_metrics_json(dir / "no-interaction_eval" / "metrics.json");
  REQUIRE(ni.size() == 1);
  CHECK(ni[0].mbpf == 0.0);
  CHECK(first_line(dir / "dcp-net_eval" / "tables.csv") == kTablesHeader);
  CHECK(first_line(dir / "dcp-net_eval" / "ledger.csv") == "frame,src,dst,kind,bytes");
  CHECK(std::filesystem::exists(dir / "dcp-net_eval" / "frames"));

  CHECK(cli({"eval", "--dataset", data, "--ckpt", (dir / "dcp-net").string(), "--baseline",
             "concat-all", "--out", (dir / "x").string()})
            .code == 1);

  const Run sw = cli({"sweep", "--kind", "threshold", "--dataset", data, "--ckpt",
                      (dir / "dcp-net").string(), "--out", (dir / "sweep").string()});
  REQUIRE_MESSAGE(sw.code == 0, sw.err);
  std::ifstream rows(dir / "sweep" / "threshold_sweep.csv");
  std::size_t n = 0;
  for (std::string l; std::getline(rows, l);) ++n;
  CHECK(n == 12);

  const Run rp = cli({"report", "--inputs", (dir / "no-interaction_eval").string(),
                      (dir / "dcp-net_eval" / "metrics.json").string(), "--out",
                      (dir / "report").string()});
  REQUIRE_MESSAGE(rp.code == 0, rp.err);
  CHECK(read_metrics_json(dir / "report" / "metrics.json").size() == 2);
}
