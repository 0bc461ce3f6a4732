#pragma once

// Client contracts for the external model services (speech recognition,
// translation, image generation, captioning, text embedding, sentiment).
//
// Every service speaks the same JSON request/response contract through a
// Transport, so mock and remote backends are interchangeable per service.
// Typed clients add validation, retries and attempt logging on top.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stop_token>
#include <string>
#include <thread>
#include <vector>

#include "rlab/codec.hpp"
#include "rlab/domain.hpp"
#include "rlab/error.hpp"

namespace rlab::clients {

struct ClientConfig {
  std::string endpoint;
  std::int64_t timeout_ms = 10000;
  int retries = 2;
  std::string auth_token_env;  // name of the env var holding the bearer token
  std::int64_t backoff_initial_ms = 250;
  double backoff_multiplier = 2.0;

  void validate() const {
    require(timeout_ms > 0, ErrorKind::Validation, "timeout_ms must be > 0");
    require(retries >= 0, ErrorKind::Validation, "retries must be >= 0");
    require(backoff_initial_ms >= 0 && backoff_multiplier >= 1.0, ErrorKind::Validation, "invalid backoff settings");
  }
};

inline void from_json(const json& j, ClientConfig& c) {
  c.endpoint = j.value("endpoint", c.endpoint);
  c.timeout_ms = j.value("timeout_ms", c.timeout_ms);
  c.retries = j.value("retries", c.retries);
  c.auth_token_env = j.value("auth_token_env", c.auth_token_env);
  c.backoff_initial_ms = j.value("backoff_initial_ms", c.backoff_initial_ms);
  c.backoff_multiplier = j.value("backoff_multiplier", c.backoff_multiplier);
}

struct AttemptRecord {
  std::string service;
  int attempt = 0;  // 1-based
  bool ok = false;
  std::string error;
  std::int64_t elapsed_ms = 0;
  std::int64_t backoff_ms = 0;  // delay scheduled after this attempt
};

class AttemptLog {
 public:
  void add(AttemptRecord r) {
    std::lock_guard lock(mu_);
    records_.push_back(std::move(r));
  }
  std::vector<AttemptRecord> records() const {
    std::lock_guard lock(mu_);
    return records_;
  }

 private:
  mutable std::mutex mu_;
  std::vector<AttemptRecord> records_;
};

struct CallContext {
  std::stop_token stop;
  AttemptLog* log = nullptr;
  // Waits out a retry backoff. Empty means "account for it, don't block"
  // (virtual time).
  std::function<void(std::int64_t)> sleep;
};

struct Reply {
  json body;
  std::int64_t elapsed_ms = 0;
};

class Transport {
 public:
  virtual ~Transport() = default;
  // Throws ClientError on failure. Implementations must not exceed timeout_ms.
  virtual Reply call(const json& request, std::int64_t timeout_ms, const std::stop_token& stop) = 0;
  virtual Backend backend() const = 0;
};

template <typename T>
struct Timed {
  T value;
  std::int64_t elapsed_ms = 0;  // attempts plus backoff
  int attempts = 1;
};

// One service endpoint plus its retry policy.
class ServiceClient {
 public:
  ServiceClient(std::string service, std::shared_ptr<Transport> transport, ClientConfig config)
      : service_(std::move(service)), transport_(std::move(transport)), config_(std::move(config)) {
    config_.validate();
    require(transport_ != nullptr, ErrorKind::Validation, service_ + ": missing transport");
  }

  const std::string& service() const { return service_; }
  const ClientConfig& config() const { return config_; }
  Backend backend() const { return transport_->backend(); }

  Timed<json> invoke(const json& request, const CallContext& ctx) const {
    std::int64_t elapsed = 0;
    const int max_attempts = config_.retries + 1;
    for (int attempt = 1;; ++attempt) {
      if (ctx.stop.stop_requested()) throw ClientError(ErrorKind::Client, service_ + ": cancelled", false, elapsed);
      try {
        Reply reply = transport_->call(request, config_.timeout_ms, ctx.stop);
        elapsed += reply.elapsed_ms;
        if (ctx.log) ctx.log->add({service_, attempt, true, {}, reply.elapsed_ms, 0});
        return {std::move(reply.body), elapsed, attempt};
      } catch (const ClientError& e) {
        elapsed += e.elapsed_ms();
        const bool last = attempt >= max_attempts || !e.retryable();
        std::int64_t backoff = 0;
        if (!last) {
          backoff = static_cast<std::int64_t>(
              std::llround(config_.backoff_initial_ms * std::pow(config_.backoff_multiplier, attempt - 1)));
        }
        if (ctx.log) ctx.log->add({service_, attempt, false, e.what(), e.elapsed_ms(), backoff});
        if (last) {
          throw ClientError(e.kind(), service_ + " failed after " + std::to_string(attempt) + " attempt(s): " + e.what(),
                            false, elapsed);
        }
        elapsed += backoff;
        if (ctx.sleep) ctx.sleep(backoff);
      }
    }
  }

 private:
  std::string service_;
  std::shared_ptr<Transport> transport_;
  ClientConfig config_;
};

inline std::string required_string(const json& body, const char* key, const std::string& service) {
  auto it = body.find(key);
  if (it == body.end() || !it->is_string()) {
    throw ClientError(ErrorKind::Client, service + ": response lacks string field '" + key + "'", false);
  }
  return it->get<std::string>();
}

class SpeechClient {
 public:
  explicit SpeechClient(ServiceClient client) : client_(std::move(client)) {}

  // Raw recognizer output; never post-corrected.
  Timed<std::string> transcribe(std::span<const std::uint8_t> pcm, Language language_hint,
                                const CallContext& ctx = {}) const {
    require(!pcm.empty(), ErrorKind::Validation, "transcribe requires non-empty audio");
    const json req{{"audio_b64", codec::base64_encode(pcm)}, {"language_hint", to_string(language_hint)}};
    auto r = client_.invoke(req, ctx);
    return {required_string(r.value, "text", client_.service()), r.elapsed_ms, r.attempts};
  }

 private:
  ServiceClient client_;
};

class TranslationClient {
 public:
  explicit TranslationClient(ServiceClient client) : client_(std::move(client)) {}

  // English input is returned verbatim without contacting the service.
  Timed<std::string> translate(const std::string& text, Language source, const CallContext& ctx = {}) const {
    if (source == Language::EN) return {text, 0, 0};
    const json req{{"text", text}, {"source_language", to_string(source)}, {"target_language", "EN"}};
    auto r = client_.invoke(req, ctx);
    return {required_string(r.value, "text", client_.service()), r.elapsed_ms, r.attempts};
  }

  Timed<std::string> translate(const std::string& text, std::string_view source_code, const CallContext& ctx = {}) const {
    return translate(text, parse_language(source_code), ctx);
  }

 private:
  ServiceClient client_;
};

struct GeneratedImage {
  std::vector<std::uint8_t> image;
  EmbeddingVector output_embedding;
  Backend backend = Backend::Mock;
};

class GenerationClient {
 public:
  explicit GenerationClient(ServiceClient client) : client_(std::move(client)) {}

  // Wire body: {prompt, reference_image_b64, image_scale, text_guidance,
  // denoise_steps, seed} and nothing else.
  static json request_body(const GenerationRequest& req, std::span<const std::uint8_t> reference_image) {
    return json{{"prompt", req.prompt},
                {"reference_image_b64", codec::base64_encode(reference_image)},
                {"image_scale", req.image_scale},
                {"text_guidance", req.text_guidance},
                {"denoise_steps", req.denoise_steps},
                {"seed", req.seed}};
  }

  Timed<GeneratedImage> generate(const GenerationRequest& req, std::span<const std::uint8_t> reference_image,
                                 const CallContext& ctx = {}) const {
    req.validate();
    auto r = client_.invoke(request_body(req, reference_image), ctx);
    GeneratedImage out;
    out.backend = client_.backend();
    out.image = codec::base64_decode(required_string(r.value, "image_b64", client_.service()));
    auto it = r.value.find("output_embedding");
    if (it == r.value.end() || !it->is_array() || it->empty()) {
      throw ClientError(ErrorKind::Client, client_.service() + ": response lacks output_embedding", false);
    }
    out.output_embedding.values = it->get<std::vector<double>>();
    return {std::move(out), r.elapsed_ms, r.attempts};
  }

 private:
  ServiceClient client_;
};

inline const std::string kCaptionInstruction =
    "This image was generated as a positive reinterpretation of a scene. Describe what this new image "
    "communicates emotionally and semantically.";

class CaptionClient {
 public:
  CaptionClient(ServiceClient primary, std::optional<ServiceClient> fallback)
      : primary_(std::move(primary)), fallback_(std::move(fallback)) {}

  Timed<CaptionResult> caption(std::span<const std::uint8_t> image, const std::string& instruction = kCaptionInstruction,
                               const CallContext& ctx = {}) const {
    require(!image.empty(), ErrorKind::Validation, "caption requires an image artifact");
    const json req{{"image_b64", codec::base64_encode(image)}, {"instruction", instruction}};
    std::int64_t elapsed = 0;
    int attempts = 0;
    std::string primary_problem;
    try {
      auto r = primary_.invoke(req, ctx);
      elapsed += r.elapsed_ms;
      attempts += r.attempts;
      if (auto text = usable_text(r.value)) return {{*text, CaptionSource::Primary}, elapsed, attempts};
      primary_problem = "primary captioner declined";
    } catch (const ClientError& e) {
      elapsed += e.elapsed_ms();
      primary_problem = e.what();
    }
    if (!fallback_) throw ClientError(ErrorKind::CaptionUnavailable, primary_problem, false, elapsed);
    try {
      auto r = fallback_->invoke(req, ctx);
      elapsed += r.elapsed_ms;
      attempts += r.attempts;
      if (auto text = usable_text(r.value)) return {{*text, CaptionSource::Fallback}, elapsed, attempts};
      throw ClientError(ErrorKind::CaptionUnavailable, primary_problem + "; fallback returned no caption", false, elapsed);
    } catch (const ClientError& e) {
      if (e.kind() == ErrorKind::CaptionUnavailable) throw;
      throw ClientError(ErrorKind::CaptionUnavailable, primary_problem + "; fallback: " + e.what(), false,
                        elapsed + e.elapsed_ms());
    }
  }

 private:
  static std::optional<std::string> usable_text(const json& body) {
    if (body.value("refused", false)) return std::nullopt;
    auto it = body.find("text");
    if (it == body.end() || !it->is_string() || it->get<std::string>().empty()) return std::nullopt;
    return it->get<std::string>();
  }

  ServiceClient primary_;
  std::optional<ServiceClient> fallback_;
};

class EmbeddingClient {
 public:
  explicit EmbeddingClient(ServiceClient client) : client_(std::move(client)) {}

  Timed<EmbeddingVector> embed(const std::string& text, const CallContext& ctx = {}) const {
    require(!text.empty(), ErrorKind::Validation, "embed requires non-empty text");
    auto r = client_.invoke(json{{"text", text}}, ctx);
    auto it = r.value.find("embedding");
    if (it == r.value.end() || !it->is_array() || it->empty()) {
      throw ClientError(ErrorKind::Client, client_.service() + ": response lacks embedding", false);
    }
    EmbeddingVector v{it->get<std::vector<double>>()};
    require(std::isfinite(v.norm()), ErrorKind::DegenerateInput, "embedding has a non-finite norm");
    return {std::move(v), r.elapsed_ms, r.attempts};
  }

 private:
  ServiceClient client_;
};

class SentimentClient {
 public:
  explicit SentimentClient(ServiceClient client) : client_(std::move(client)) {}

  Timed<SentimentProbabilities> classify(const std::string& text, const CallContext& ctx = {}) const {
    require(!text.empty(), ErrorKind::Validation, "sentiment classification requires non-empty text");
    auto r = client_.invoke(json{{"text", text}}, ctx);
    SentimentProbabilities p;
    try {
      p.p_negative = r.value.at("negative").get<double>();
      p.p_neutral = r.value.at("neutral").get<double>();
      p.p_positive = r.value.at("positive").get<double>();
    } catch (const json::exception& e) {
      throw ClientError(ErrorKind::Client, client_.service() + ": malformed sentiment response: " + e.what(), false);
    }
    return {p, r.elapsed_ms, r.attempts};
  }

 private:
  ServiceClient client_;
};

// The full set of services one session uses.
struct ServiceSuite {
  SpeechClient speech;
  TranslationClient translation;
  GenerationClient generation;
  CaptionClient caption;
  EmbeddingClient embedding;
  SentimentClient sentiment;
};

}  // namespace rlab::clients
