#include <algorithm>
#include <set>
#include <sstream>

#include "doctest.h"
#include "parprobe/cli.hpp"
#include "parprobe/metrics.hpp"
#include "parprobe/pools.hpp"
#include "synthetic.hpp"

using namespace parprobe;
using namespace parprobe::testing;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  Run r;
  r.code = cli::dispatch(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::vector<std::string> asp_args() {
  const auto f = fixture_dir();
  return {"--asp-dir", (f / "asp" / "sermons").string(), "--asp-annotations", (f / "asp" / "sets.json").string()};
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("no arguments prints usage and exits 2") {
  const auto r = run({});
  CHECK(r.code == 2);
  CHECK((r.out + r.err).find("Usage") != std::string::npos);
  CHECK(run({"--help"}).code == 0);
  CHECK(run({"frobnicate"}).code == 2);
}

TEST_CASE("distance training on the sermon fixture matches the frozen CSV") {
  const auto dir = scratch_dir("cli_train");
  const auto r = run(concat({"train", "--run-dir", dir.string(), "--task", "rhetorical", "--scorer", "distance"}, asp_args()));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto produced = read_file(dir / "results.csv");
  CHECK(produced == read_file(fixture_dir() / "expected" / "train_rhetorical_distance.csv"));
  const auto rows = read_report_csv(dir / "results.csv");
  const auto map = std::find_if(rows.begin(), rows.end(), [](const ReportRow& row) { return row.metric == "map"; });
  REQUIRE(map != rows.end());
  CHECK(map->value.values.size() == 5);
  CHECK(map->value.mean > 0.5);
  for (int f = 0; f < 5; ++f) CHECK(fs::exists(dir / ("scorer_fold" + std::to_string(f) + ".bin")));
}

TEST_CASE("report joins probe and prompt results") {
  const auto dir = scratch_dir("cli_report");
  Aggregate probe{0.93, 0.01, {0.92, 0.94}};
  write_report_csv({ReportRow{"rhetorical", "m1b", "base", "mlp", "all_layers", "map", probe},
                    ReportRow{"rhetorical", "m1b", "base", "mlp", "all_layers", "mrr", probe}},
                   dir / "probe.csv", "x=1");
  write_report_csv({ReportRow{"rhetorical", "m1b", "base", "prompted", "-", "map", Aggregate{0.18, 0.0, {0.18}}}},
                   dir / "prompt.csv", "x=2");
  const auto r = run({"report", "--run-dir", (dir / "out").string(), "--inputs", (dir / "probe.csv").string(),
                      (dir / "prompt.csv").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  std::istringstream lines(read_file(dir / "out" / "comparison.csv"));
  std::vector<std::string> body;
  for (std::string line; std::getline(lines, line);) {
    if (!line.starts_with("#")) body.push_back(line);
  }
  REQUIRE(body.size() == 3);
  CHECK(body[0] == "task,model,variant,method,map,map_std,mrr,pairwise_accuracy");
  CHECK(body[1] == "rhetorical,m1b,base,mlp/all_layers,0.93,0.01,0.93,");
  CHECK(body[2] == "rhetorical,m1b,base,prompted,0.18,0,,");
}

TEST_CASE("configuration files and validation") {
  const auto dir = scratch_dir("cli_config");
  write_file(dir / "run.ini", "seed = 99\nscorer = distance\ntask = rhetorical\nfolds = 3\n");
  auto r = run(concat({"train", "--config", (dir / "run.ini").string(), "--folds", "4", "--run-dir",
                       (dir / "a").string()},
                      asp_args()));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto config = read_file(dir / "a" / "config.ini");
  CHECK(config.find("seed=99") != std::string::npos);
  const auto rows = read_report_csv(dir / "a" / "results.csv");
  CHECK(rows.front().value.values.size() == 4);

  write_file(dir / "bad.ini", "sed = 1\n");
  r = run({"train", "--config", (dir / "bad.ini").string()});
  CHECK(r.code == 1);

  r = run(concat({"train", "--run-dir", (dir / "b").string(), "--scorer", "mlp"}, asp_args()));
  CHECK(r.code == 1);
  CHECK(r.err.find("store") != std::string::npos);

  r = run({"train", "--run-dir", (dir / "c").string(), "--asp-dir", "/nonexistent/sermons", "--asp-annotations",
           (fixture_dir() / "asp" / "sets.json").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("asp") != std::string::npos);

  r = run({"train", "--run-dir", (dir / "d").string(), "--scorer", "svm"});
  CHECK(r.code == 1);
  CHECK(r.err.find("scorer") != std::string::npos);
}

TEST_CASE("run directory defaults to the config hash") {
  const auto dir = scratch_dir("cli_hash");
  auto r = run(concat({"ingest", "--out", (dir / "x").string()}, asp_args()));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  auto s = run(concat({"ingest", "--out", (dir / "y").string(), "--jobs", "3"}, asp_args()));
  REQUIRE(s.code == 0);
  std::vector<std::string> a, b;
  for (const auto& e : fs::directory_iterator(dir / "x")) a.push_back(e.path().filename().string());
  for (const auto& e : fs::directory_iterator(dir / "y")) b.push_back(e.path().filename().string());
  REQUIRE(a.size() == 1);
  CHECK(a == b);
  CHECK(a[0].size() == 16);
}

TEST_CASE("pools, layers and evaluation on a synthetic store") {
  const auto dir = scratch_dir("cli_layers");
  REQUIRE(run(concat({"pools", "--run-dir", dir.string(), "--task", "rhetorical"}, asp_args())).code == 0);
  const auto pools = read_pools_jsonl(dir / "pools.jsonl");
  write_table_store(planted_table(pools, 6, 0.2, 3, 2, 4), dir / "store.narb");
  const std::vector<std::string> common = {"--run-dir", dir.string(), "--store", (dir / "store.narb").string(),
                                           "--scorer", "linear", "--epochs", "3", "--folds", "2"};
  auto r = run(concat(concat({"layers"}, common), asp_args()));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto layers = read_file(dir / "layers.csv");
  CHECK(std::count(layers.begin(), layers.end(), '\n') == 2 + 4);
  CHECK(layers.find("linear,layer_2,") != std::string::npos);
  CHECK(layers.find("linear,all_layers,") != std::string::npos);

  r = run(concat(concat({"train", "--layer", "2"}, common), asp_args()));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  r = run(concat(concat({"eval", "--layer", "2"}, common), asp_args()));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(fs::exists(dir / "eval.csv"));
}

TEST_CASE("auxiliary span classification") {
  const auto dir = scratch_dir("cli_aux");
  const auto lit = (fixture_dir() / "litbank").string();
  REQUIRE(run({"pools", "--run-dir", dir.string(), "--task", "event", "--litbank", lit}).code == 0);
  const auto instances = read_aux_jsonl(dir / "aux.jsonl");
  write_token_store(instances, 4, 2, 3.0, 5, dir / "tokens.narb");
  const auto r = run({"train", "--run-dir", dir.string(), "--task", "event", "--litbank", lit, "--store",
                      (dir / "tokens.narb").string(), "--layer", "1", "--proj", "8", "--epochs", "20", "--lr", "0.01",
                      "--folds", "2"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto rows = read_report_csv(dir / "results.csv");
  std::set<std::string> metrics;
  for (const auto& row : rows) metrics.insert(row.metric);
  CHECK(metrics == std::set<std::string>{"accuracy", "auroc", "f1"});
}

TEST_CASE("prompting with the oracle provider") {
  const auto dir = scratch_dir("cli_prompt");
  const auto r = run(concat({"prompt", "--run-dir", dir.string(), "--task", "rhetorical", "--provider", "oracle"}, asp_args()));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto rows = read_report_csv(dir / "prompt_results.csv");
  const auto map = std::find_if(rows.begin(), rows.end(), [](const ReportRow& row) { return row.metric == "map"; });
  REQUIRE(map != rows.end());
  CHECK(map->value.mean == 1.0);
  CHECK(fs::exists(dir / "transcript.jsonl"));

  const auto replay = run(concat({"prompt", "--run-dir", (dir / "replay").string(), "--task", "rhetorical",
                                  "--provider", "replay", "--replay", (dir / "transcript.jsonl").string()},
                                 asp_args()));
  REQUIRE_MESSAGE(replay.code == 0, replay.err);
  CHECK(read_report_csv(dir / "replay" / "prompt_results.csv")[0].value.mean == 1.0);

  ::unsetenv("PARPROBE_MISSING_KEY");
  const auto auth = run(concat({"prompt", "--run-dir", (dir / "http").string(), "--task", "rhetorical", "--provider",
                                "http", "--endpoint", "http://127.0.0.1:9/v1", "--provider-model", "m", "--auth-env",
                                "PARPROBE_MISSING_KEY"},
                               asp_args()));
  CHECK(auth.code == 1);
  CHECK(auth.err.find("PARPROBE_MISSING_KEY") != std::string::npos);
}

TEST_CASE("lexical baselines over annotated branches") {
  const auto dir = scratch_dir("cli_baselines");
  const auto r = run(concat({"baselines", "--run-dir", dir.string(), "--task", "rhetorical", "--pairs", "40",
                             "--annotations", (fixture_dir() / "annotations" / "asp.jsonl").string()},
                            asp_args()));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto csv = read_file(dir / "baselines.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 2 + 40 * 9);
  const auto stats = read_file(dir / "baselines_stats.csv");
  CHECK(stats.find("semantic_cosine,20,20,") != std::string::npos);

  const auto f = fixture_dir();
  const auto n = run({"baselines", "--run-dir", (dir / "arn").string(), "--task", "narrative", "--arn",
                      (f / "arn" / "narratives.jsonl").string(), "--arn-scores", (f / "arn" / "acceptability.csv").string(),
                      "--methods", "jaccard_tokens,bleu", "--annotations", (f / "annotations" / "arn.jsonl").string()});
  REQUIRE_MESSAGE(n.code == 0, n.err);
}

}  // TEST_SUITE
