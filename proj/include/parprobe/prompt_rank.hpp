#ifndef PARPROBE_PROMPT_RANK_HPP_
#define PARPROBE_PROMPT_RANK_HPP_

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "parprobe/common.hpp"
#include "parprobe/metrics.hpp"
#include "parprobe/pools.hpp"

namespace parprobe {

inline constexpr std::size_t kPromptCandidates = 20;
inline constexpr std::size_t kContextTokens = 50;

enum class PromptTask { narrative, rhetorical };

std::string_view to_string(PromptTask task);
PromptTask prompt_task_from_string(std::string_view name);

/// "C01" ... "C20".
std::string candidate_label(std::size_t position);

struct PromptSpec {
  std::string example_id;
  PromptTask task = PromptTask::narrative;
  std::string anchor;
  std::vector<std::string> candidates;  // original pool order
  std::optional<std::string> context;
  std::uint64_t seed = 0;
  /// permutation[k] = original index of the candidate shown at position k.
  std::vector<std::size_t> permutation;

  /// Fills the permutation from `seed`.
  static PromptSpec make(std::string example_id, PromptTask task, std::string anchor,
                         std::vector<std::string> candidates, std::optional<std::string> context, std::uint64_t seed);
  void validate() const;
};

struct BuiltPrompt {
  std::string system;
  std::string user;
  std::string schema;  // JSON schema of the expected reply
};

BuiltPrompt build_prompt(const PromptSpec& spec);

struct ModelResponse {
  std::vector<double> scores;  // original pool order
  std::vector<std::pair<std::size_t, std::string>> top3;  // original index, reasoning
};

/// Reply that violates the schema (missing id, bad range, unparseable).
class SchemaError : public Error {
 public:
  using Error::Error;
};

/// Parses a provider payload: either a chat-completion envelope or the
/// reply object itself. Falls back to the first balanced {...} in free text.
ModelResponse parse_response(std::string_view raw, const PromptSpec& spec, Warnings* warnings = nullptr);

struct ProviderConfig {
  std::string name = "openai";
  std::string model;
  std::string endpoint;  // full URL of the chat-completions route
  std::string auth_env;  // name of the env var holding the API key; empty = no auth
  std::size_t max_retries = 3;
  double initial_backoff_s = 2.0;
  double timeout_s = 60.0;
  std::size_t max_concurrency = 1;
  double temperature = 0.0;

  void validate() const;
};

class TransientError : public Error {
 public:
  using Error::Error;
};

class AuthError : public Error {
 public:
  using Error::Error;
};

/// One request/response exchange. Implementations must be callable from
/// several threads at once.
class Provider {
 public:
  virtual ~Provider() = default;
  /// Called once before any request; throws AuthError when unusable.
  virtual void check_auth() {}
  /// Returns the raw payload. Throws TransientError for retryable failures.
  virtual std::string complete(const BuiltPrompt& prompt, const PromptSpec& spec) = 0;
};

/// Chat-completions over HTTP(S).
std::unique_ptr<Provider> make_http_provider(const ProviderConfig& config);

/// Scores each candidate 10 * gold label; for offline checks only.
class OracleProvider : public Provider {
 public:
  explicit OracleProvider(std::map<std::string, std::vector<std::uint8_t>> labels) : labels_(std::move(labels)) {}
  std::string complete(const BuiltPrompt& prompt, const PromptSpec& spec) override;

 private:
  std::map<std::string, std::vector<std::uint8_t>> labels_;
};

class ConstantProvider : public Provider {
 public:
  explicit ConstantProvider(double value) : value_(value) {}
  std::string complete(const BuiltPrompt& prompt, const PromptSpec& spec) override;

 private:
  double value_;
};

/// Serves the last raw response per example from a transcript file.
class ReplayProvider : public Provider {
 public:
  explicit ReplayProvider(const std::filesystem::path& transcript);
  std::string complete(const BuiltPrompt& prompt, const PromptSpec& spec) override;

 private:
  std::map<std::string, std::string> responses_;
};

/// Up to `n_tokens` tokens immediately before token `start`, as they appear
/// in the text; empty at the document start.
std::string preceding_context(const Document& doc, std::size_t start, std::size_t n_tokens = kContextTokens);

/// Texts for the spans of a pool.
struct PromptSource {
  std::function<std::string(const Span&)> text;
  std::function<std::string(const Span&)> context;  // only used for rhetorical
};

std::vector<PromptSpec> make_prompt_specs(const std::vector<RankingExample>& pools, PromptTask task,
                                          const PromptSource& source, std::uint64_t seed);

struct PromptedExample {
  std::string example_id;
  bool failed = false;
  std::string error;
  std::size_t attempts = 0;
  std::vector<double> scores;  // original order; empty when failed
  RankMetrics metrics;
};

struct EvalReport {
  std::vector<PromptedExample> examples;  // pool order
  MeanRankMetrics mean;
  std::size_t failed = 0;
  std::size_t schema_failures = 0;  // attempts rejected by parse_response
  double failure_rate = 0.0;
};

struct RunOptions {
  std::optional<std::filesystem::path> transcript;
  std::function<void(std::chrono::duration<double>)> sleep;  // default: std::this_thread::sleep_for
};

EvalReport run_prompted_eval(const std::vector<RankingExample>& pools, const std::vector<PromptSpec>& specs,
                             Provider& provider, const ProviderConfig& config, const RunOptions& options = {},
                             Warnings* warnings = nullptr);

/// Rows in the probe results schema: one per metric plus failure_rate.
std::vector<ReportRow> prompt_report_rows(const EvalReport& report, const std::string& task, const std::string& model,
                                          const std::string& variant);

}  // namespace parprobe

#endif  // PARPROBE_PROMPT_RANK_HPP_
