#pragma once

#include <chrono>
#include <cstdlib>
#include <string>

#include "httplib.h"
#include "rlab/clients.hpp"

namespace rlab::clients {

struct ParsedEndpoint {
  std::string scheme_host_port;
  std::string path;
};

inline ParsedEndpoint parse_endpoint(const std::string& url) {
  const auto scheme_end = url.find("://");
  require(scheme_end != std::string::npos, ErrorKind::Validation, "endpoint '" + url + "' lacks a scheme");
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

// POSTs the request JSON to the configured endpoint. Connection failures and
// 5xx replies are retryable; 4xx replies are not. The bearer token is read
// from the environment on every call and never stored.
class HttpTransport final : public Transport {
 public:
  explicit HttpTransport(ClientConfig config) : config_(std::move(config)), target_(parse_endpoint(config_.endpoint)) {
    config_.validate();
  }

  Reply call(const json& request, std::int64_t timeout_ms, const std::stop_token& stop) override {
    if (stop.stop_requested()) throw ClientError(ErrorKind::Client, "cancelled", false);
    httplib::Client client(target_.scheme_host_port);
    const auto timeout = std::chrono::milliseconds(timeout_ms);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);

    httplib::Headers headers;
    if (!config_.auth_token_env.empty()) {
      if (const char* token = std::getenv(config_.auth_token_env.c_str())) {
        headers.emplace("Authorization", std::string("Bearer ") + token);
      }
    }

    const auto start = std::chrono::steady_clock::now();
    auto res = client.Post(target_.path, headers, request.dump(), "application/json");
    const auto elapsed = std::min<std::int64_t>(
        timeout_ms,
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start).count());

    if (!res) {
      const auto err = res.error();
      const auto kind = err == httplib::Error::Read || err == httplib::Error::Write ? ErrorKind::Timeout : ErrorKind::Client;
      throw ClientError(kind, config_.endpoint + ": " + httplib::to_string(err), true, elapsed);
    }
    if (res->status >= 500) {
      throw ClientError(ErrorKind::Client, config_.endpoint + ": HTTP " + std::to_string(res->status), true, elapsed);
    }
    if (res->status >= 400) {
      throw ClientError(ErrorKind::Client, config_.endpoint + ": HTTP " + std::to_string(res->status), false, elapsed);
    }
    auto body = json::parse(res->body, nullptr, false);
    if (body.is_discarded()) throw ClientError(ErrorKind::Client, config_.endpoint + ": response is not JSON", false, elapsed);
    return {std::move(body), elapsed};
  }

  Backend backend() const override { return Backend::Remote; }

 private:
  ClientConfig config_;
  ParsedEndpoint target_;
};

}  // namespace rlab::clients
