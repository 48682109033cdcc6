#pragma once

// Optional chat-completion call for clustering the lens token lists.
// Needs CPPHTTPLIB_OPENSSL_SUPPORT and OpenSSL for https endpoints.

#include <cstdlib>
#include <optional>
#include <regex>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "steerlab/error.hpp"

namespace steerlab {

inline constexpr const char* kLlmUrlEnv = "STEERLAB_LLM_URL";
inline constexpr const char* kLlmKeyEnv = "STEERLAB_LLM_KEY";
inline constexpr const char* kLlmModelEnv = "STEERLAB_LLM_MODEL";
inline constexpr const char* kLlmTimeoutEnv = "STEERLAB_LLM_TIMEOUT_S";

class LlmError : public Error {
 public:
  LlmError(const std::string& what, int status = 0) : Error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

struct LlmEndpoint {
  std::string url;  // full URL of the chat-completions route
  std::string key;
  std::string model = "gpt-4o";
  int timeout_s = 120;
};

// Disabled (nullopt) unless the URL variable is set.
inline std::optional<LlmEndpoint> llm_endpoint_from_env() {
  const char* url = std::getenv(kLlmUrlEnv);
  if (!url || !*url) return std::nullopt;
  LlmEndpoint e;
  e.url = url;
  if (const char* k = std::getenv(kLlmKeyEnv)) e.key = k;
  if (const char* m = std::getenv(kLlmModelEnv); m && *m) e.model = m;
  if (const char* t = std::getenv(kLlmTimeoutEnv); t && *t) {
    try {
      e.timeout_s = std::stoi(t);
    } catch (const std::exception&) {
      throw ConfigError(std::string(kLlmTimeoutEnv) + " is not an integer: " + t);
    }
    if (e.timeout_s < 1) throw ConfigError(std::string(kLlmTimeoutEnv) + " must be >= 1");
  }
  return e;
}

// Pulls choices[0].message.content out of a chat-completion response body.
inline std::string parse_chat_response(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error& e) {
    throw LlmError("malformed JSON reply at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  try {
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception&) {
    throw LlmError("reply has no choices[0].message.content");
  }
}

inline std::string cluster_via_llm(const std::string& prompt, const LlmEndpoint& ep) {
  static const std::regex url_re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(ep.url, m, url_re)) throw ConfigError("invalid LLM endpoint URL: " + ep.url);
  const std::string origin = m[1].str();
  const std::string path = m[2].matched ? m[2].str() : "/";

  httplib::Client cli(origin);
  if (!cli.is_valid()) throw LlmError("cannot create client for " + origin + " (https needs OpenSSL support)");
  cli.set_connection_timeout(ep.timeout_s, 0);
  cli.set_read_timeout(ep.timeout_s, 0);
  cli.set_write_timeout(ep.timeout_s, 0);
  httplib::Headers headers;
  if (!ep.key.empty()) headers.emplace("Authorization", "Bearer " + ep.key);

  const nlohmann::json req = {{"model", ep.model}, {"messages", {{{"role", "user"}, {"content", prompt}}}}};
  auto res = cli.Post(path, headers, req.dump(), "application/json");
  if (!res) throw LlmError("request to " + ep.url + " failed: " + httplib::to_string(res.error()));
  if (res->status < 200 || res->status >= 300) {
    throw LlmError("endpoint " + ep.url + " returned HTTP " + std::to_string(res->status), res->status);
  }
  return parse_chat_response(res->body);
}

}  // namespace steerlab
