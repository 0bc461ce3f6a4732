#pragma once

// Deterministic in-process backends for every service. All outputs are pure
// functions of (request, configured seed).

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "rlab/clients.hpp"
#include "rlab/codec.hpp"
#include "rlab/conditioning.hpp"
#include "rlab/rng.hpp"

namespace rlab::mock {

// Hash-to-vector embedding with additive word composition:
// embed(text) = normalize(sum of token vectors).
class TextEmbedder {
 public:
  explicit TextEmbedder(std::size_t dim = conditioning::kDefaultModelDim, std::uint64_t seed = 0)
      : dim_(dim), seed_(seed) {
    require(dim_ > 0, ErrorKind::Validation, "embedding dim must be > 0");
  }

  std::size_t dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }

  static std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
      const auto uc = static_cast<unsigned char>(c);
      if (std::isalnum(uc) || c == '\'' || uc >= 0x80) {
        cur.push_back(static_cast<char>(std::tolower(uc)));
      } else if (!cur.empty()) {
        out.push_back(std::move(cur));
        cur.clear();
      }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
  }

  // Unnormalized token vector, i.i.d. standard normal entries seeded by the
  // token's hash.
  std::vector<double> token_vector(std::string_view token) const {
    Rng rng(derive_seed(seed_, {fnv1a64(token)}));
    std::vector<double> v(dim_);
    for (auto& x : v) x = rng.normal();
    return v;
  }

  EmbeddingVector embed_tokens(const std::vector<std::string>& tokens) const {
    require(!tokens.empty(), ErrorKind::Validation, "text has no embeddable tokens");
    std::vector<double> sum(dim_, 0.0);
    for (const auto& t : tokens) {
      const auto v = token_vector(t);
      for (std::size_t i = 0; i < dim_; ++i) sum[i] += v[i];
    }
    return normalized(std::move(sum));
  }

  EmbeddingVector embed(std::string_view text) const {
    require(!text.empty(), ErrorKind::Validation, "embed requires non-empty text");
    return embed_tokens(tokenize(text));
  }

  // Reference-image encoder: printable text files are embedded as text,
  // anything else as a byte-hash-seeded random direction.
  EmbeddingVector encode_image(std::span<const std::uint8_t> bytes) const {
    require(!bytes.empty(), ErrorKind::Validation, "reference image is empty");
    const std::string_view text(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    const bool printable = std::all_of(text.begin(), text.end(), [](char c) {
      const auto uc = static_cast<unsigned char>(c);
      return uc >= 0x20 || c == '\n' || c == '\r' || c == '\t';
    });
    if (printable) {
      auto tokens = tokenize(text);
      if (!tokens.empty()) return embed_tokens(tokens);
    }
    Rng rng(derive_seed(seed_, {fnv1a64(text), 0x696d67ULL}));
    std::vector<double> v(dim_);
    for (auto& x : v) x = rng.normal();
    return normalized(std::move(v));
  }

  static EmbeddingVector normalized(std::vector<double> v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    require(n > 0.0, ErrorKind::DegenerateInput, "zero-norm embedding");
    for (auto& x : v) x /= n;
    return EmbeddingVector{std::move(v)};
  }

 private:
  std::size_t dim_;
  std::uint64_t seed_;
};

// Failure and latency injection shared by all mock transports.
struct Behavior {
  std::int64_t latency_ms = 0;
  bool stall = false;          // never answers; fails at the timeout
  bool always_fail = false;    // retryable "unreachable" on every call
  int fail_first = 0;          // first N calls fail (retryable)
};

class MockTransport : public clients::Transport {
 public:
  explicit MockTransport(Behavior behavior = {}) : behavior_(behavior) {}

  clients::Reply call(const json& request, std::int64_t timeout_ms, const std::stop_token&) override {
    const int call_no = calls_.fetch_add(1) + 1;
    if (behavior_.stall || behavior_.latency_ms > timeout_ms) {
      throw ClientError(ErrorKind::Timeout, "no response within " + std::to_string(timeout_ms) + " ms", true, timeout_ms);
    }
    if (behavior_.always_fail || call_no <= behavior_.fail_first) {
      throw ClientError(ErrorKind::Client, "mock endpoint unreachable", true, behavior_.latency_ms);
    }
    return {respond(request), behavior_.latency_ms};
  }

  Backend backend() const override { return Backend::Mock; }
  int calls() const { return calls_.load(); }
  Behavior& behavior() { return behavior_; }

 protected:
  virtual json respond(const json& request) = 0;

 private:
  Behavior behavior_;
  std::atomic<int> calls_{0};
};

// Audio payloads starting with "fixture:<key>" are looked up in the fixture
// table; all-zero PCM is silence and transcribes to "".
class SpeechRecognizer final : public MockTransport {
 public:
  explicit SpeechRecognizer(std::map<std::string, std::string> fixtures = default_fixtures(), Behavior b = {})
      : MockTransport(b), fixtures_(std::move(fixtures)) {}

  static std::map<std::string, std::string> default_fixtures() {
    return {{"smile", "the people are smiling and safe"},
            {"silence", ""},
            {"it_1", "questa persona guarirà"},
            {"recover", "this person will recover"},
            {"rescue", "they are being rescued"}};
  }

  void add_fixture(std::string key, std::string text) { fixtures_[std::move(key)] = std::move(text); }

 protected:
  json respond(const json& request) override {
    const auto audio = codec::base64_decode(request.at("audio_b64").get<std::string>());
    const std::string_view s(reinterpret_cast<const char*>(audio.data()), audio.size());
    constexpr std::string_view kPrefix = "fixture:";
    if (s.starts_with(kPrefix)) {
      std::string key(s.substr(kPrefix.size()));
      while (!key.empty() && (key.back() == '\0' || std::isspace(static_cast<unsigned char>(key.back())))) key.pop_back();
      auto it = fixtures_.find(key);
      if (it == fixtures_.end()) throw ClientError(ErrorKind::Client, "unknown audio fixture '" + key + "'", false);
      return {{"text", it->second}};
    }
    if (std::all_of(audio.begin(), audio.end(), [](std::uint8_t b) { return b == 0; })) return {{"text", ""}};
    return {{"text", "unintelligible speech"}};
  }

 private:
  std::map<std::string, std::string> fixtures_;
};

class Translator final : public MockTransport {
 public:
  using Key = std::pair<std::string, std::string>;  // (language, text)

  explicit Translator(std::map<Key, std::string> fixtures = default_fixtures(), Behavior b = {})
      : MockTransport(b), fixtures_(std::move(fixtures)) {}

  static std::map<Key, std::string> default_fixtures() {
    return {{{"IT", "fixture:it_1"}, "this person will recover"},
            {{"IT", "questa persona guarirà"}, "this person will recover"},
            {{"DE", "sie werden gerettet"}, "they are being rescued"},
            {{"FR", "les gens sourient"}, "the people are smiling"}};
  }

  void add_fixture(std::string language, std::string text, std::string english) {
    fixtures_[{std::move(language), std::move(text)}] = std::move(english);
  }

 protected:
  json respond(const json& request) override {
    const auto lang = request.at("source_language").get<std::string>();
    const auto text = request.at("text").get<std::string>();
    auto it = fixtures_.find({lang, text});
    return {{"text", it != fixtures_.end() ? it->second : text}};
  }

 private:
  std::map<Key, std::string> fixtures_;
};

inline constexpr std::string_view kMockImageFormat = "rlab-mock-image/1";

// Generation through conditioning::mock_generate on mock embeddings. The
// "image" is a JSON document carrying the output embedding and the words a
// captioner may describe it with.
class ImageGenerator final : public MockTransport {
 public:
  ImageGenerator(TextEmbedder embedder, double epsilon = conditioning::kDefaultMockNoise, Behavior b = {})
      : MockTransport(b), embedder_(std::move(embedder)), epsilon_(epsilon) {}

  const TextEmbedder& embedder() const { return embedder_; }

 protected:
  json respond(const json& request) override {
    const auto prompt = request.at("prompt").get<std::string>();
    const auto reference = codec::base64_decode(request.at("reference_image_b64").get<std::string>());
    const double scale = request.at("image_scale").get<double>();
    const auto seed = request.at("seed").get<std::uint64_t>();

    const auto prompt_emb = embedder_.embed(prompt);
    const auto ref_emb = embedder_.encode_image(reference);
    const auto out = conditioning::mock_generate(prompt_emb, ref_emb, scale, seed, epsilon_);

    const std::string reference_text(reference.begin(), reference.end());
    json image{{"format", kMockImageFormat},
               {"prompt", prompt},
               {"reference_text", is_text(reference) ? reference_text : std::string()},
               {"image_scale", scale},
               {"text_guidance", request.at("text_guidance")},
               {"denoise_steps", request.at("denoise_steps")},
               {"seed", seed},
               {"embedding", out.values}};
    const std::string bytes = image.dump();
    return {{"image_b64", codec::base64_encode(codec::as_bytes(bytes))}, {"output_embedding", out.values}};
  }

 private:
  static bool is_text(const std::vector<std::uint8_t>& b) {
    return std::all_of(b.begin(), b.end(), [](std::uint8_t c) { return c >= 0x20 || c == '\n' || c == '\t' || c == '\r'; });
  }

  TextEmbedder embedder_;
  double epsilon_;
};

inline std::optional<json> parse_mock_image(std::span<const std::uint8_t> bytes) {
  const auto j = json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded() || !j.is_object() || j.value("format", "") != kMockImageFormat) return std::nullopt;
  return j;
}

// Describes a mock image with the words (from its prompt and reference
// scene) whose summed vectors best match the image embedding, chosen
// greedily. Primary mode declines scenes containing a refusal keyword.
class Captioner final : public MockTransport {
 public:
  enum class Mode { Primary, Fallback };

  Captioner(TextEmbedder embedder, Mode mode, std::set<std::string> refuse_keywords = {}, Behavior b = {})
      : MockTransport(b), embedder_(std::move(embedder)), mode_(mode), refuse_(std::move(refuse_keywords)) {}

  static std::set<std::string> default_refusals() { return {"blood", "corpse", "gore", "mutilated"}; }

  std::string describe(const json& image) const {
    std::vector<std::string> vocab;
    std::set<std::string> seen;
    for (const char* key : {"prompt", "reference_text"}) {
      for (auto& t : TextEmbedder::tokenize(image.value(key, ""))) {
        if (seen.insert(t).second) vocab.push_back(t);
      }
    }
    const auto target = image.at("embedding").get<std::vector<double>>();
    if (vocab.empty() || target.size() != embedder_.dim()) return "an abstract image";

    std::vector<std::vector<double>> vecs;
    vecs.reserve(vocab.size());
    for (const auto& w : vocab) vecs.push_back(embedder_.token_vector(w));

    const std::size_t max_words = mode_ == Mode::Primary ? 12 : 6;
    std::vector<double> sum(embedder_.dim(), 0.0);
    std::vector<std::string> chosen;
    double best_cos = -std::numeric_limits<double>::infinity();
    for (std::size_t step = 0; step < max_words; ++step) {
      std::size_t best = vocab.size();
      double cand_best = best_cos;
      for (std::size_t w = 0; w < vocab.size(); ++w) {
        double dot = 0.0, nn = 0.0;
        for (std::size_t i = 0; i < sum.size(); ++i) {
          const double s = sum[i] + vecs[w][i];
          dot += s * target[i];
          nn += s * s;
        }
        const double c = nn > 0.0 ? dot / std::sqrt(nn) : -1.0;
        if (c > cand_best + 1e-12) {
          cand_best = c;
          best = w;
        }
      }
      if (best == vocab.size()) break;
      best_cos = cand_best;
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += vecs[best][i];
      chosen.push_back(vocab[best]);
    }
    std::string text;
    for (const auto& w : chosen) {
      if (!text.empty()) text += ' ';
      text += w;
    }
    return text;
  }

 protected:
  json respond(const json& request) override {
    const auto bytes = codec::base64_decode(request.at("image_b64").get<std::string>());
    const auto image = parse_mock_image(bytes);
    if (!image) return {{"text", mode_ == Mode::Primary ? "" : "an image"}, {"refused", mode_ == Mode::Primary}};
    if (mode_ == Mode::Primary) {
      for (const auto& t : TextEmbedder::tokenize(image->value("reference_text", ""))) {
        if (refuse_.contains(t)) return {{"refused", true}};
      }
    }
    return {{"text", describe(*image)}};
  }

 private:
  TextEmbedder embedder_;
  Mode mode_;
  std::set<std::string> refuse_;
};

class Embedder final : public MockTransport {
 public:
  explicit Embedder(TextEmbedder embedder, Behavior b = {}) : MockTransport(b), embedder_(std::move(embedder)) {}

 protected:
  json respond(const json& request) override {
    return {{"embedding", embedder_.embed(request.at("text").get<std::string>()).values}};
  }

 private:
  TextEmbedder embedder_;
};

// Fixture table first, then a small polarity lexicon through a softmax.
class SentimentClassifier final : public MockTransport {
 public:
  explicit SentimentClassifier(std::map<std::string, SentimentProbabilities> fixtures = {}, Behavior b = {})
      : MockTransport(b), fixtures_(std::move(fixtures)) {}

  void add_fixture(std::string text, SentimentProbabilities p) { fixtures_[std::move(text)] = p; }

  static SentimentProbabilities lexicon_probabilities(std::string_view text) {
    static const std::set<std::string> kPositive{
        "recover", "recovers", "recovered", "rescued", "rescue", "safe", "smiling", "smile", "happy", "help",
        "helping", "helped", "healing", "heal", "better", "calm", "hope", "love", "loved", "peaceful", "beautiful",
        "fine", "good", "joy", "laugh", "laughing", "together", "support", "care", "caring", "bright", "sunny",
        "grow", "strong", "saved", "warm", "friends", "fun", "celebrate", "relaxed", "enjoying", "okay", "well",
        "playing", "play", "kind", "gentle", "proud", "nice", "lovely", "glad"};
    static const std::set<std::string> kNegative{
        "injured", "injury", "blood", "hurt", "crying", "dead", "death", "pain", "sad", "fear", "afraid",
        "accident", "crash", "broken", "dirty", "sick", "danger", "dangerous", "angry", "attack", "war", "fire",
        "destroyed", "lonely", "wound", "wounded", "bleeding", "victim", "terrible", "scared", "violence", "gun",
        "weapon", "disease", "suffering", "dying", "poor", "hungry", "lying", "alone", "ruined", "damaged"};
    int pos = 0, neg = 0;
    for (const auto& t : TextEmbedder::tokenize(text)) {
      pos += kPositive.contains(t);
      neg += kNegative.contains(t);
    }
    const double lp = 1.2 * pos, ln = 1.2 * neg, l0 = 1.0;
    const double m = std::max({lp, ln, l0});
    const double ep = std::exp(lp - m), en = std::exp(ln - m), e0 = std::exp(l0 - m);
    const double z = ep + en + e0;
    return {en / z, e0 / z, ep / z};
  }

 protected:
  json respond(const json& request) override {
    const auto text = request.at("text").get<std::string>();
    auto it = fixtures_.find(text);
    const auto p = it != fixtures_.end() ? it->second : lexicon_probabilities(text);
    return {{"negative", p.p_negative}, {"neutral", p.p_neutral}, {"positive", p.p_positive}};
  }

 private:
  std::map<std::string, SentimentProbabilities> fixtures_;
};

struct MockSuiteOptions {
  std::size_t embedding_dim = conditioning::kDefaultModelDim;
  std::uint64_t embedding_seed = 0;
  double generation_noise = conditioning::kDefaultMockNoise;
  std::set<std::string> refuse_keywords = Captioner::default_refusals();
  clients::ClientConfig client_config{};
  Behavior speech{}, translation{}, generation{}, caption_primary{}, caption_fallback{}, embedding{}, sentiment{};
};

// Handles to the concrete mocks so tests and the simulator can register
// fixtures after construction.
struct MockBackends {
  std::shared_ptr<SpeechRecognizer> speech;
  std::shared_ptr<Translator> translation;
  std::shared_ptr<ImageGenerator> generation;
  std::shared_ptr<Captioner> caption_primary;
  std::shared_ptr<Captioner> caption_fallback;
  std::shared_ptr<Embedder> embedding;
  std::shared_ptr<SentimentClassifier> sentiment;
  TextEmbedder text_embedder;
};

inline MockBackends make_mock_backends(const MockSuiteOptions& o = {}) {
  TextEmbedder te(o.embedding_dim, o.embedding_seed);
  return MockBackends{
      std::make_shared<SpeechRecognizer>(SpeechRecognizer::default_fixtures(), o.speech),
      std::make_shared<Translator>(Translator::default_fixtures(), o.translation),
      std::make_shared<ImageGenerator>(te, o.generation_noise, o.generation),
      std::make_shared<Captioner>(te, Captioner::Mode::Primary, o.refuse_keywords, o.caption_primary),
      std::make_shared<Captioner>(te, Captioner::Mode::Fallback, std::set<std::string>{}, o.caption_fallback),
      std::make_shared<Embedder>(te, o.embedding),
      std::make_shared<SentimentClassifier>(std::map<std::string, SentimentProbabilities>{}, o.sentiment),
      te};
}

inline clients::ServiceSuite make_suite(const MockBackends& b, const clients::ClientConfig& cfg = {}) {
  using clients::ServiceClient;
  return clients::ServiceSuite{
      clients::SpeechClient(ServiceClient("asr", b.speech, cfg)),
      clients::TranslationClient(ServiceClient("translate", b.translation, cfg)),
      clients::GenerationClient(ServiceClient("generate", b.generation, cfg)),
      clients::CaptionClient(ServiceClient("caption", b.caption_primary, cfg),
                             ServiceClient("caption_fallback", b.caption_fallback, cfg)),
      clients::EmbeddingClient(ServiceClient("embed", b.embedding, cfg)),
      clients::SentimentClient(ServiceClient("sentiment", b.sentiment, cfg)),
  };
}

}  // namespace rlab::mock
