#include "parprobe/prompt_rank.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include "json.hpp"
#include "parprobe/rng.hpp"

namespace parprobe {

using json = nlohmann::json;

std::string_view to_string(PromptTask task) { return task == PromptTask::narrative ? "narrative" : "rhetorical"; }

PromptTask prompt_task_from_string(std::string_view name) {
  if (name == "narrative") return PromptTask::narrative;
  if (name == "rhetorical") return PromptTask::rhetorical;
  throw Error("unknown task '" + std::string(name) + "'");
}

std::string candidate_label(std::size_t position) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "C%02zu", position + 1);
  return buf;
}

PromptSpec PromptSpec::make(std::string example_id, PromptTask task, std::string anchor,
                            std::vector<std::string> candidates, std::optional<std::string> context,
                            std::uint64_t seed) {
  PromptSpec s;
  s.example_id = std::move(example_id);
  s.task = task;
  s.anchor = std::move(anchor);
  s.candidates = std::move(candidates);
  s.context = std::move(context);
  s.seed = seed;
  s.permutation.resize(s.candidates.size());
  std::iota(s.permutation.begin(), s.permutation.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(s.permutation);
  s.validate();
  return s;
}

void PromptSpec::validate() const {
  if (candidates.size() != kPromptCandidates) {
    throw Error("prompt '" + example_id + "': expected " + std::to_string(kPromptCandidates) + " candidates, got " +
                std::to_string(candidates.size()));
  }
  if (permutation.size() != candidates.size()) throw Error("prompt '" + example_id + "': permutation size mismatch");
  std::vector<char> seen(candidates.size(), 0);
  for (auto p : permutation) {
    if (p >= candidates.size() || seen[p]) throw Error("prompt '" + example_id + "': permutation is not a bijection");
    seen[p] = 1;
  }
}

namespace {

constexpr const char* kSystemPrompt =
    "You judge parallelism between texts. Score every candidate from 0.0 to 10.0 for how parallel it is to the "
    "anchor, where 10.0 is most parallel. Reply with a single JSON object and nothing else.";

constexpr const char* kNarrativeInstruction =
    "Two stories are parallel when they share the same abstract lesson or moral, even if their characters, goals "
    "and settings differ.";

constexpr const char* kRhetoricalInstruction =
    "Two spans are parallel when they repeat a syntactic or semantic pattern within the same passage.";

std::string schema_text() {
  json ids = json::array();
  json props = json::object();
  for (std::size_t k = 0; k < kPromptCandidates; ++k) {
    ids.push_back(candidate_label(k));
    props[candidate_label(k)] = {{"type", "number"}, {"minimum", 0.0}, {"maximum", 10.0}};
  }
  json schema = {
      {"type", "object"},
      {"required", {"scores", "top3"}},
      {"properties",
       {{"scores", {{"type", "object"}, {"required", ids}, {"properties", props}}},
        {"top3",
         {{"type", "array"},
          {"minItems", 3},
          {"maxItems", 3},
          {"items",
           {{"type", "object"},
            {"required", {"id", "reasoning"}},
            {"properties", {{"id", {{"type", "string"}}}, {"reasoning", {{"type", "string"}}}}}}}}}}}};
  return schema.dump();
}

/// First balanced {...} block, honoring JSON string quoting.
std::optional<std::string> first_json_object(std::string_view text) {
  const auto start = text.find('{');
  if (start == std::string_view::npos) return std::nullopt;
  int depth = 0;
  bool in_string = false, escaped = false;
  for (std::size_t i = start; i < text.size(); ++i) {
    const char c = text[i];
    if (in_string) {
      if (escaped) escaped = false;
      else if (c == '\\') escaped = true;
      else if (c == '"') in_string = false;
      continue;
    }
    if (c == '"') in_string = true;
    else if (c == '{') ++depth;
    else if (c == '}' && --depth == 0) return std::string(text.substr(start, i - start + 1));
  }
  return std::nullopt;
}

json parse_reply_object(std::string_view raw) {
  std::string content(raw);
  json envelope = json::parse(raw, nullptr, false);
  if (!envelope.is_discarded() && envelope.is_object() && envelope.contains("choices")) {
    try {
      content = envelope.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception&) {
      throw SchemaError("chat-completion payload without message content");
    }
  } else if (!envelope.is_discarded() && envelope.is_object()) {
    return envelope;
  }
  json reply = json::parse(content, nullptr, false);
  if (reply.is_discarded() || !reply.is_object()) {
    const auto block = first_json_object(content);
    if (!block) throw SchemaError("reply holds no JSON object");
    reply = json::parse(*block, nullptr, false);
    if (reply.is_discarded() || !reply.is_object()) throw SchemaError("reply holds no parseable JSON object");
  }
  return reply;
}

double score_value(const json& v, const std::string& id) {
  double x = 0.0;
  if (v.is_number()) {
    x = v.get<double>();
  } else if (v.is_string()) {
    const auto s = v.get<std::string>();
    try {
      std::size_t used = 0;
      x = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
    } catch (const std::exception&) {
      throw SchemaError("score for " + id + " is not a number: '" + s + "'");
    }
  } else {
    throw SchemaError("score for " + id + " is not a number");
  }
  if (!std::isfinite(x) || x < 0.0 || x > 10.0) {
    throw SchemaError("score for " + id + " out of range [0, 10]: " + format_number(x));
  }
  return x;
}

}  // namespace

BuiltPrompt build_prompt(const PromptSpec& spec) {
  spec.validate();
  BuiltPrompt p;
  p.system = kSystemPrompt;
  p.schema = schema_text();
  std::string u;
  u += "Task: ";
  u += spec.task == PromptTask::narrative ? kNarrativeInstruction : kRhetoricalInstruction;
  u += "\n\n";
  if (spec.context) {
    u += "Context (text preceding the anchor):\n" + *spec.context + "\n\n";
  }
  u += "Anchor:\n" + spec.anchor + "\n\nCandidates:\n";
  for (std::size_t k = 0; k < spec.permutation.size(); ++k) {
    u += "[" + candidate_label(k) + "] " + spec.candidates[spec.permutation[k]] + "\n";
  }
  u += "\nScore all " + std::to_string(kPromptCandidates) +
       " candidates. Give a short reasoning for the three highest-scoring ones. Reply as JSON matching this schema:\n";
  u += p.schema;
  u += "\n";
  p.user = std::move(u);
  return p;
}

ModelResponse parse_response(std::string_view raw, const PromptSpec& spec, Warnings* warnings) {
  spec.validate();
  const json reply = parse_reply_object(raw);
  if (!reply.contains("scores") || !reply["scores"].is_object()) throw SchemaError("reply lacks a 'scores' object");
  const json& scores = reply["scores"];
  for (const auto& [key, unused] : scores.items()) {
    bool known = false;
    for (std::size_t k = 0; k < kPromptCandidates && !known; ++k) known = candidate_label(k) == key;
    if (!known) throw SchemaError("reply scores unknown candidate id '" + key + "'");
  }
  ModelResponse r;
  r.scores.assign(spec.candidates.size(), 0.0);
  std::vector<double> shown(kPromptCandidates);
  for (std::size_t k = 0; k < kPromptCandidates; ++k) {
    const std::string id = candidate_label(k);
    if (!scores.contains(id)) throw SchemaError("reply is missing a score for " + id);
    shown[k] = score_value(scores[id], id);
    r.scores[spec.permutation[k]] = shown[k];
  }
  if (!reply.contains("top3") || !reply["top3"].is_array()) throw SchemaError("reply lacks a 'top3' array");
  std::set<std::size_t> top_positions;
  for (const auto& entry : reply["top3"]) {
    if (!entry.is_object() || !entry.contains("id") || !entry["id"].is_string()) {
      throw SchemaError("top3 entry without a string id");
    }
    const auto id = entry["id"].get<std::string>();
    std::size_t pos = kPromptCandidates;
    for (std::size_t k = 0; k < kPromptCandidates; ++k) {
      if (candidate_label(k) == id) pos = k;
    }
    if (pos == kPromptCandidates) throw SchemaError("top3 names unknown candidate id '" + id + "'");
    const std::string reasoning =
        entry.contains("reasoning") && entry["reasoning"].is_string() ? entry["reasoning"].get<std::string>() : "";
    r.top3.emplace_back(spec.permutation[pos], reasoning);
    top_positions.insert(pos);
  }
  if (r.top3.size() != 3) throw SchemaError("top3 must hold three entries, got " + std::to_string(r.top3.size()));
  double min_top = 10.0, max_rest = 0.0;
  for (std::size_t k = 0; k < kPromptCandidates; ++k) {
    if (top_positions.count(k)) min_top = std::min(min_top, shown[k]);
    else max_rest = std::max(max_rest, shown[k]);
  }
  if (top_positions.size() != 3 || min_top < max_rest) {
    warn(warnings, "prompt '" + spec.example_id + "': top3 does not match the three highest scores");
  }
  return r;
}

void ProviderConfig::validate() const {
  if (max_concurrency < 1) throw Error("provider config: max_concurrency must be >= 1");
  if (!(initial_backoff_s >= 0.0)) throw Error("provider config: initial_backoff_s must be >= 0");
  if (!(timeout_s > 0.0)) throw Error("provider config: timeout_s must be > 0");
}

namespace {

std::string fake_reply(const PromptSpec& spec, const std::vector<double>& original_scores) {
  json scores = json::object();
  std::vector<std::size_t> order(kPromptCandidates);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t k = 0; k < kPromptCandidates; ++k) scores[candidate_label(k)] = original_scores[spec.permutation[k]];
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return original_scores[spec.permutation[a]] > original_scores[spec.permutation[b]];
  });
  json top = json::array();
  for (std::size_t i = 0; i < 3; ++i) top.push_back({{"id", candidate_label(order[i])}, {"reasoning", "mock"}});
  json content = {{"scores", scores}, {"top3", top}};
  json envelope = {{"choices", json::array({{{"message", {{"role", "assistant"}, {"content", content.dump()}}}}})}};
  return envelope.dump();
}

}  // namespace

std::string OracleProvider::complete(const BuiltPrompt&, const PromptSpec& spec) {
  auto it = labels_.find(spec.example_id);
  if (it == labels_.end()) throw Error("oracle provider has no labels for '" + spec.example_id + "'");
  std::vector<double> scores(it->second.size());
  for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = it->second[i] ? 10.0 : 0.0;
  if (scores.size() != spec.candidates.size()) throw Error("oracle labels do not match the pool size");
  return fake_reply(spec, scores);
}

std::string ConstantProvider::complete(const BuiltPrompt&, const PromptSpec& spec) {
  return fake_reply(spec, std::vector<double>(spec.candidates.size(), value_));
}

ReplayProvider::ReplayProvider(const std::filesystem::path& transcript) {
  std::ifstream in(transcript, std::ios::binary);
  if (!in) throw Error("cannot open transcript " + transcript.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw Error(transcript.string() + ":" + std::to_string(line_no) + ": bad JSON");
    if (j.contains("raw_response") && j["raw_response"].is_string()) {
      responses_[j.at("example_id").get<std::string>()] = j["raw_response"].get<std::string>();
    }
  }
}

std::string ReplayProvider::complete(const BuiltPrompt&, const PromptSpec& spec) {
  auto it = responses_.find(spec.example_id);
  if (it == responses_.end()) throw Error("transcript has no response for '" + spec.example_id + "'");
  return it->second;
}

std::string preceding_context(const Document& doc, std::size_t start, std::size_t n_tokens) {
  if (start > doc.tokens.size()) throw Error("context start beyond document '" + doc.doc_id + "'");
  const std::size_t b = start >= n_tokens ? start - n_tokens : 0;
  return b == start ? std::string() : doc.span_text(b, start);
}

std::vector<PromptSpec> make_prompt_specs(const std::vector<RankingExample>& pools, PromptTask task,
                                          const PromptSource& source, std::uint64_t seed) {
  std::vector<PromptSpec> specs;
  for (const auto& ex : pools) {
    std::vector<std::string> texts;
    for (const auto& c : ex.candidates) texts.push_back(source.text(c));
    std::optional<std::string> context;
    if (task == PromptTask::rhetorical && source.context) context = source.context(ex.anchor);
    specs.push_back(PromptSpec::make(ex.example_id, task, source.text(ex.anchor), std::move(texts), std::move(context),
                                     derive_seed(seed, "prompt_perm:" + ex.example_id)));
  }
  return specs;
}

EvalReport run_prompted_eval(const std::vector<RankingExample>& pools, const std::vector<PromptSpec>& specs,
                             Provider& provider, const ProviderConfig& config, const RunOptions& options,
                             Warnings* warnings) {
  config.validate();
  if (pools.size() != specs.size()) throw Error("prompted eval: pool and spec counts differ");
  for (std::size_t i = 0; i < pools.size(); ++i) {
    if (pools[i].example_id != specs[i].example_id) throw Error("prompted eval: pools and specs are not aligned");
    specs[i].validate();
  }
  provider.check_auth();

  auto sleep = options.sleep ? options.sleep : [](std::chrono::duration<double> d) { std::this_thread::sleep_for(d); };

  struct Attempt {
    std::size_t number = 0;
    std::string raw;
    std::string error;
    double elapsed_ms = 0.0;
  };
  EvalReport report;
  report.examples.resize(pools.size());
  std::vector<std::vector<Attempt>> attempts(pools.size());
  std::vector<Warnings> local_warnings(pools.size());
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> schema_failures{0};
  std::mutex fatal_mutex;
  std::exception_ptr fatal;

  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= pools.size()) return;
      {
        std::lock_guard lock(fatal_mutex);
        if (fatal) return;
      }
      const PromptSpec& spec = specs[i];
      PromptedExample& out = report.examples[i];
      out.example_id = spec.example_id;
      const BuiltPrompt prompt = build_prompt(spec);
      double backoff = config.initial_backoff_s;
      for (std::size_t attempt = 0; attempt <= config.max_retries; ++attempt) {
        Attempt rec;
        rec.number = attempt + 1;
        const auto t0 = std::chrono::steady_clock::now();
        try {
          rec.raw = provider.complete(prompt, spec);
          rec.elapsed_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
          const ModelResponse parsed = parse_response(rec.raw, spec, &local_warnings[i]);
          out.scores = parsed.scores;
          out.failed = false;
          out.error.clear();
          attempts[i].push_back(rec);
          out.attempts = attempt + 1;
          break;
        } catch (const AuthError&) {
          std::lock_guard lock(fatal_mutex);
          if (!fatal) fatal = std::current_exception();
          return;
        } catch (const SchemaError& e) {
          ++schema_failures;
          rec.error = std::string("schema: ") + e.what();
        } catch (const TransientError& e) {
          rec.error = std::string("transient: ") + e.what();
        } catch (const Error& e) {
          rec.error = e.what();
          attempts[i].push_back(rec);
          out.failed = true;
          out.error = rec.error;
          out.attempts = attempt + 1;
          break;
        }
        rec.elapsed_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        attempts[i].push_back(rec);
        out.failed = true;
        out.error = rec.error;
        out.attempts = attempt + 1;
        if (attempt < config.max_retries) {
          sleep(std::chrono::duration<double>(backoff));
          backoff *= 2.0;
        }
      }
    }
  };

  const std::size_t n_threads = std::min(config.max_concurrency, std::max<std::size_t>(pools.size(), 1));
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (fatal) std::rethrow_exception(fatal);

  for (auto& w : local_warnings) {
    for (auto& item : w.items) warn(warnings, item);
  }

  std::vector<RankMetrics> ok;
  for (std::size_t i = 0; i < pools.size(); ++i) {
    auto& ex = report.examples[i];
    if (ex.failed) {
      ++report.failed;
      warn(warnings, "prompt '" + ex.example_id + "' failed after " + std::to_string(ex.attempts) +
                         " attempt(s): " + ex.error);
      continue;
    }
    ex.metrics = rank_metrics_from_scores(ex.scores, pools[i].labels);
    ok.push_back(ex.metrics);
  }
  report.mean = mean_rank_metrics(ok);
  report.schema_failures = schema_failures.load();
  report.failure_rate = pools.empty() ? 0.0 : static_cast<double>(report.failed) / static_cast<double>(pools.size());

  if (options.transcript) {
    std::ofstream out(*options.transcript, std::ios::binary);
    if (!out) throw Error("cannot write transcript " + options.transcript->string());
    for (std::size_t i = 0; i < pools.size(); ++i) {
      const BuiltPrompt prompt = build_prompt(specs[i]);
      for (const auto& a : attempts[i]) {
        const bool final_ok = !report.examples[i].failed && &a == &attempts[i].back();
        json j = {{"example_id", specs[i].example_id},
                  {"attempt", a.number},
                  {"provider", config.name},
                  {"model", config.model},
                  {"seed", specs[i].seed},
                  {"permutation", specs[i].permutation},
                  {"request", {{"system", prompt.system}, {"user", prompt.user}}},
                  {"raw_response", a.raw},
                  {"error", a.error.empty() ? json(nullptr) : json(a.error)},
                  {"scores", final_ok ? json(report.examples[i].scores) : json(nullptr)},
                  {"elapsed_ms", a.elapsed_ms}};
        if (a.raw.empty()) j["raw_response"] = nullptr;
        out << j.dump() << '\n';
      }
    }
  }
  return report;
}

std::vector<ReportRow> prompt_report_rows(const EvalReport& report, const std::string& task, const std::string& model,
                                          const std::string& variant) {
  auto row = [&](const std::string& metric, double value) {
    ReportRow r{task, model, variant, "prompted", "-", metric, {}};
    r.value.mean = value;
    r.value.std = 0.0;
    r.value.values = {value};
    return r;
  };
  return {row("map", report.mean.map), row("mrr", report.mean.mrr),
          row("pairwise_accuracy", report.mean.pairwise_accuracy), row("failure_rate", report.failure_rate)};
}

}  // namespace parprobe
