#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <atomic>
#include <cstdlib>
#include <map>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "json.hpp"
#include "parprobe/prompt_rank.hpp"
#include "synthetic.hpp"

using namespace parprobe;
using namespace parprobe::testing;
using nlohmann::json;

namespace {

std::vector<std::string> candidate_texts() {
  std::vector<std::string> out;
  for (int i = 0; i < 20; ++i) out.push_back("candidate text " + std::to_string(i));
  return out;
}

PromptSpec spec(std::uint64_t seed, std::string id = "ex") {
  return PromptSpec::make(std::move(id), PromptTask::narrative, "the anchor", candidate_texts(), std::nullopt, seed);
}

// Reply object scoring the candidate shown at position k with value(k).
std::string reply(const std::function<json(std::size_t)>& value, std::size_t skip = 99) {
  json scores = json::object();
  for (std::size_t k = 0; k < 20; ++k) {
    if (k != skip) scores[candidate_label(k)] = value(k);
  }
  json top = json::array();
  for (const char* id : {"C01", "C02", "C03"}) top.push_back({{"id", id}, {"reasoning", "r"}});
  return json{{"scores", scores}, {"top3", top}}.dump();
}

std::vector<RankingExample> prompt_pools(std::size_t n) {
  auto pools = planted_pools(n, 20, 3, 21);
  return pools;
}

std::vector<PromptSpec> specs_for(const std::vector<RankingExample>& pools, std::uint64_t seed) {
  PromptSource src;
  src.text = [](const Span& s) { return s.key(); };
  return make_prompt_specs(pools, PromptTask::narrative, src, seed);
}

class ScriptedProvider : public Provider {
 public:
  explicit ScriptedProvider(std::vector<std::function<std::string(const PromptSpec&)>> steps)
      : steps_(std::move(steps)) {}
  std::string complete(const BuiltPrompt&, const PromptSpec& spec) override {
    const std::size_t i = calls_++;
    return steps_[std::min(i, steps_.size() - 1)](spec);
  }
  std::size_t calls() const { return calls_; }

 private:
  std::vector<std::function<std::string(const PromptSpec&)>> steps_;
  std::atomic<std::size_t> calls_{0};
};

class LockedOut : public Provider {
 public:
  void check_auth() override { throw AuthError("no key"); }
  std::string complete(const BuiltPrompt&, const PromptSpec&) override {
    ++calls;
    return {};
  }
  int calls = 0;
};

}  // namespace

TEST_SUITE("prompt") {

TEST_CASE("same seed gives an identical prompt") {
  const auto a = build_prompt(spec(5)), b = build_prompt(spec(5));
  CHECK(a.user == b.user);
  CHECK(a.system == b.system);
  CHECK(a.user.find("[C20]") != std::string::npos);
  CHECK(a.user.find("[C21]") == std::string::npos);
}

TEST_CASE("different seeds permute the same candidates") {
  const auto a = spec(5), b = spec(6);
  CHECK(a.permutation != b.permutation);
  std::map<std::string, std::string> ma, mb;
  std::multiset<std::string> sa, sb;
  for (std::size_t k = 0; k < 20; ++k) {
    sa.insert(a.candidates[a.permutation[k]]);
    sb.insert(b.candidates[b.permutation[k]]);
  }
  CHECK(sa == sb);
  auto sorted = a.permutation;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t k = 0; k < 20; ++k) CHECK(sorted[k] == k);
}

TEST_CASE("rhetorical prompt carries the fifty preceding tokens") {
  std::string text;
  for (int i = 0; i < 80; ++i) text += (i ? " w" : "w") + std::to_string(i);
  const auto doc = make_document("s", text);
  const auto ctx = preceding_context(doc, 60);
  CHECK(ctx.rfind("w10 w11", 0) == 0);
  CHECK(ctx.size() >= 4);
  CHECK(ctx.substr(ctx.size() - 4) == " w59");
  CHECK(tokenize(ctx).size() == kContextTokens);
  CHECK(preceding_context(doc, 0).empty());
  CHECK(tokenize(preceding_context(doc, 7)).size() == 7);

  const auto s = PromptSpec::make("r", PromptTask::rhetorical, "w60 w61", candidate_texts(), ctx, 3);
  const auto p = build_prompt(s);
  CHECK(p.user.find("\n" + ctx + "\n") != std::string::npos);
  CHECK(p.user.find("w9 ") == std::string::npos);
}

TEST_CASE("valid reply maps scores back to pool order") {
  const auto s = spec(9);
  // score shown position k with k / 2
  const auto r = parse_response(reply([](std::size_t k) { return k / 2.0; }), s);
  REQUIRE(r.scores.size() == 20);
  for (std::size_t k = 0; k < 20; ++k) CHECK(r.scores[s.permutation[k]] == k / 2.0);
  CHECK(r.top3.size() == 3);
  CHECK(r.top3[0].first == s.permutation[0]);
}

TEST_CASE("reply parsing accepts envelopes, strings and surrounding prose") {
  const auto s = spec(9);
  const auto body = reply([](std::size_t k) { return std::to_string(k % 10) + ".5"; });
  const json env = {{"choices", json::array({{{"message", {{"content", "Sure! " + body + " Hope this helps."}}}}})}};
  const auto r = parse_response(env.dump(), s);
  CHECK(r.scores[s.permutation[3]] == 3.5);
}

TEST_CASE("schema violations") {
  const auto s = spec(9);
  auto msg = thrown_message([&] { parse_response(reply([](std::size_t) { return 1.0; }, 7), s); });
  CHECK(msg.find("missing a score for C08") != std::string::npos);
  msg = thrown_message([&] { parse_response(reply([](std::size_t k) { return k == 4 ? json("11.0") : json(1.0); }), s); });
  CHECK(msg.find("out of range") != std::string::npos);
  msg = thrown_message([&] { parse_response("no json here", s); });
  CHECK_FALSE(msg.empty());
  json bad = json::parse(reply([](std::size_t) { return 2.0; }));
  bad["scores"]["C21"] = 1.0;
  CHECK(thrown_message([&] { parse_response(bad.dump(), s); }).find("C21") != std::string::npos);
  bad = json::parse(reply([](std::size_t) { return 2.0; }));
  bad["top3"].erase(0);
  CHECK(thrown_message([&] { parse_response(bad.dump(), s); }).find("three") != std::string::npos);
  CHECK_THROWS_AS(parse_response("{}", s), SchemaError);
}

TEST_CASE("oracle and constant providers") {
  const auto pools = prompt_pools(12);
  const auto specs = specs_for(pools, 4);
  std::map<std::string, std::vector<std::uint8_t>> labels;
  for (const auto& ex : pools) labels[ex.example_id] = ex.labels;
  OracleProvider oracle(labels);
  ProviderConfig cfg;
  cfg.name = "oracle";
  auto report = run_prompted_eval(pools, specs, oracle, cfg);
  CHECK(report.mean.map == 1.0);
  CHECK(report.failed == 0);

  ConstantProvider constant(5.0);
  report = run_prompted_eval(pools, specs, constant, cfg);
  CHECK(report.mean.pairwise_accuracy == 0.0);
  double map = 0;
  for (const auto& ex : pools) map += rank_metrics(ex.labels).ap;
  CHECK(report.mean.map == doctest::Approx(map / pools.size()).epsilon(1e-12));
}

TEST_CASE("replay reproduces a run") {
  const auto pools = prompt_pools(8);
  const auto specs = specs_for(pools, 4);
  ScriptedProvider noisy({[](const PromptSpec& s) {
    return reply([&](std::size_t k) { return static_cast<double>((s.permutation[k] * 7 + s.seed % 5) % 11); });
  }});
  const auto transcript = scratch_dir("replay") / "t.jsonl";
  ProviderConfig cfg;
  cfg.max_concurrency = 3;
  const auto first = run_prompted_eval(pools, specs, noisy, cfg, RunOptions{transcript, {}});
  ReplayProvider replay(transcript);
  const auto second = run_prompted_eval(pools, specs, replay, cfg);
  CHECK(first.mean.map == second.mean.map);
  CHECK(first.mean.mrr == second.mean.mrr);
  CHECK(first.mean.pairwise_accuracy == second.mean.pairwise_accuracy);

  std::istringstream lines(read_file(transcript));
  std::string line;
  std::vector<std::string> ids;
  while (std::getline(lines, line)) ids.push_back(json::parse(line).at("example_id").get<std::string>());
  REQUIRE(ids.size() == pools.size());
  for (std::size_t i = 0; i < ids.size(); ++i) CHECK(ids[i] == pools[i].example_id);
}

TEST_CASE("transient and schema failures are retried with doubling backoff") {
  const auto pools = prompt_pools(1);
  const auto specs = specs_for(pools, 4);
  const auto good = [](const PromptSpec&) { return reply([](std::size_t k) { return k % 3 * 1.0; }); };
  ScriptedProvider flaky({[](const PromptSpec&) -> std::string { throw TransientError("503"); },
                          [](const PromptSpec&) { return std::string("garbage"); }, good});
  std::vector<double> sleeps;
  ProviderConfig cfg;
  const auto report =
      run_prompted_eval(pools, specs, flaky, cfg, RunOptions{std::nullopt, [&](auto d) { sleeps.push_back(d.count()); }});
  CHECK(report.failed == 0);
  CHECK(report.examples[0].attempts == 3);
  CHECK(report.schema_failures == 1);
  CHECK(sleeps == std::vector<double>{2.0, 4.0});

  ScriptedProvider broken({[](const PromptSpec&) { return std::string("{\"scores\": {}}"); }});
  sleeps.clear();
  const auto failed =
      run_prompted_eval(pools, specs, broken, cfg, RunOptions{std::nullopt, [&](auto d) { sleeps.push_back(d.count()); }});
  CHECK(failed.failed == 1);
  CHECK(failed.failure_rate == 1.0);
  CHECK(broken.calls() == 4);
  CHECK(failed.schema_failures == 4);
  CHECK(sleeps == std::vector<double>{2.0, 4.0, 8.0});
}

TEST_CASE("authentication failure stops before any request") {
  const auto pools = prompt_pools(3);
  LockedOut provider;
  CHECK_THROWS_AS(run_prompted_eval(pools, specs_for(pools, 1), provider, ProviderConfig{}), AuthError);
  CHECK(provider.calls == 0);
}

TEST_CASE("report rows for prompted runs") {
  EvalReport r;
  r.mean.map = 0.18;
  r.failure_rate = 0.25;
  const auto rows = prompt_report_rows(r, "narrative", "gpt", "instruct");
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].scorer == "prompted");
  CHECK(rows[0].value.mean == 0.18);
  CHECK(rows[3].metric == "failure_rate");
}

TEST_CASE("HTTP provider against a local server") {
  httplib::Server server;
  std::string seen_body, seen_auth;
  std::atomic<int> status{200};
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    seen_body = req.body;
    seen_auth = req.get_header_value("Authorization");
    res.status = status.load();
    const json env = {{"choices", json::array({{{"message", {{"content", reply([](std::size_t k) { return k % 4; })}}}}})}};
    res.set_content(env.dump(), "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread thread([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  ::setenv("PARPROBE_TEST_KEY", "sekret", 1);
  ProviderConfig cfg;
  cfg.model = "m-test";
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  cfg.auth_env = "PARPROBE_TEST_KEY";
  cfg.timeout_s = 5;
  auto provider = make_http_provider(cfg);
  provider->check_auth();
  const auto s = spec(2);
  const auto raw = provider->complete(build_prompt(s), s);
  CHECK(parse_response(raw, s).scores.size() == 20);
  const auto body = json::parse(seen_body);
  CHECK(body["model"] == "m-test");
  CHECK(body["temperature"] == 0.0);
  CHECK(body["messages"].size() == 2);
  CHECK(seen_auth == "Bearer sekret");

  status = 429;
  CHECK_THROWS_AS(provider->complete(build_prompt(s), s), TransientError);
  status = 401;
  CHECK_THROWS_AS(provider->complete(build_prompt(s), s), AuthError);
  server.stop();
  thread.join();

  ::unsetenv("PARPROBE_TEST_KEY");
  auto missing = make_http_provider(cfg);
  CHECK_THROWS_AS(missing->check_auth(), AuthError);
  cfg.endpoint = "ftp://x";
  CHECK_FALSE(thrown_message([&] { make_http_provider(cfg); }).empty());
}

}  // TEST_SUITE
