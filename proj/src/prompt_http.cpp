#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"

#include <cstdlib>
#include <regex>

#include "json.hpp"
#include "parprobe/prompt_rank.hpp"

namespace parprobe {

namespace {

struct Endpoint {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

Endpoint split_endpoint(const std::string& url) {
  static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re)) throw Error("provider endpoint is not an http(s) URL: '" + url + "'");
  return {m[1].str(), m[2].matched ? m[2].str() : "/"};
}

class HttpProvider : public Provider {
 public:
  explicit HttpProvider(ProviderConfig config) : config_(std::move(config)), endpoint_(split_endpoint(config_.endpoint)) {}

  void check_auth() override {
    if (config_.auth_env.empty()) return;
    const char* key = std::getenv(config_.auth_env.c_str());
    if (key == nullptr || *key == '\0') {
      throw AuthError("environment variable " + config_.auth_env + " is unset or empty");
    }
    token_ = key;
  }

  std::string complete(const BuiltPrompt& prompt, const PromptSpec&) override {
    httplib::Client client(endpoint_.origin);
    const auto secs = static_cast<time_t>(config_.timeout_s);
    client.set_connection_timeout(secs, 0);
    client.set_read_timeout(secs, 0);
    client.set_write_timeout(secs, 0);
    httplib::Headers headers;
    if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
    const nlohmann::json body = {
        {"model", config_.model},
        {"temperature", config_.temperature},
        {"response_format", {{"type", "json_object"}}},
        {"messages",
         nlohmann::json::array({{{"role", "system"}, {"content", prompt.system}}, {{"role", "user"}, {"content", prompt.user}}})}};
    auto res = client.Post(endpoint_.path, headers, body.dump(), "application/json");
    if (!res) throw TransientError("request failed: " + httplib::to_string(res.error()));
    if (res->status == 401 || res->status == 403) {
      throw AuthError("provider rejected credentials (HTTP " + std::to_string(res->status) + ")");
    }
    if (res->status == 408 || res->status == 429 || res->status >= 500) {
      throw TransientError("HTTP " + std::to_string(res->status));
    }
    if (res->status != 200) throw Error("HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
    return res->body;
  }

 private:
  ProviderConfig config_;
  Endpoint endpoint_;
  std::string token_;
};

}  // namespace

std::unique_ptr<Provider> make_http_provider(const ProviderConfig& config) {
  config.validate();
  if (config.model.empty()) throw Error("provider config: model must be set");
  return std::make_unique<HttpProvider>(config);
}

}  // namespace parprobe
