#include <cstdlib>
#include <regex>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "llm.hpp"

namespace selftrain {

HttpTransport::HttpTransport(LlmClientConfig config) : config_(std::move(config)) {
  static const std::regex re(R"(^(https?)://([^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(config_.endpoint, m, re)) {
    throw LlmError(LlmErrorCode::Config, "endpoint must be an http(s) URL, got '" + config_.endpoint + "'");
  }
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
  if (m[1] == "https") throw LlmError(LlmErrorCode::Config, "built without TLS support; use an http:// endpoint");
#endif
  scheme_host_port_ = m[1].str() + "://" + m[2].str();
  path_ = m[3].matched ? m[3].str() : "/";
  if (config_.model.empty()) throw LlmError(LlmErrorCode::Config, "LLM model name is required");
}

std::string HttpTransport::send(const ChatRequest& request) {
  httplib::Client client(scheme_host_port_);
  const auto secs = config_.timeout.count() / 1000;
  const auto usecs = (config_.timeout.count() % 1000) * 1000;
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);

  httplib::Headers headers;
  if (!config_.auth_env.empty()) {
    if (const char* token = std::getenv(config_.auth_env.c_str()); token && *token) {
      headers.emplace("Authorization", std::string("Bearer ") + token);
    }
  }
  ChatRequest wire = request;
  if (wire.model.empty()) wire.model = config_.model;
  const auto body = to_wire(wire).dump();
  auto res = client.Post(path_, headers, body, "application/json");
  if (!res) {
    throw LlmError(LlmErrorCode::Transport, "HTTP request failed: " + httplib::to_string(res.error()),
                   /*retryable=*/true);
  }
  if (res->status == 429 || res->status >= 500) {
    throw LlmError(LlmErrorCode::Transport, "HTTP status " + std::to_string(res->status), /*retryable=*/true);
  }
  if (res->status < 200 || res->status >= 300) {
    throw LlmError(LlmErrorCode::Transport, "HTTP status " + std::to_string(res->status) + ": " + res->body);
  }
  return content_from_wire(res->body);
}

}  // namespace selftrain
