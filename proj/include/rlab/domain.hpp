#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "rlab/error.hpp"

namespace rlab {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Condition: one cell of the 2 (emotion) x 2 (instruction) x 2 (modality)
// within-subject design.

enum class Emotion : std::uint8_t { Negative = 0, Neutral = 1 };
enum class Instruction : std::uint8_t { Describe = 0, Reappraise = 1 };
enum class Modality : std::uint8_t { NoAI = 0, AI = 1 };

inline constexpr std::size_t kCellCount = 8;

struct Condition {
  Emotion emotion = Emotion::Negative;
  Instruction instruction = Instruction::Describe;
  Modality modality = Modality::NoAI;

  friend bool operator==(const Condition&, const Condition&) = default;

  // Canonical cell index in [0, 8): emotion is the slowest-varying factor.
  constexpr std::size_t index() const {
    return static_cast<std::size_t>(emotion) * 4 + static_cast<std::size_t>(instruction) * 2 +
           static_cast<std::size_t>(modality);
  }

  static constexpr Condition from_index(std::size_t i) {
    return Condition{static_cast<Emotion>((i >> 2) & 1), static_cast<Instruction>((i >> 1) & 1),
                     static_cast<Modality>(i & 1)};
  }

  static constexpr std::array<Condition, kCellCount> all() {
    std::array<Condition, kCellCount> cells{};
    for (std::size_t i = 0; i < kCellCount; ++i) cells[i] = from_index(i);
    return cells;
  }

  bool is_ai() const { return modality == Modality::AI; }

  // Figure labels: "Neg-RAI", "Neu-D", ...
  std::string label() const {
    std::string s = emotion == Emotion::Negative ? "Neg-" : "Neu-";
    s += instruction == Instruction::Describe ? "D" : "R";
    if (modality == Modality::AI) s += "AI";
    return s;
  }

  static Condition parse(std::string_view label) {
    for (const auto& c : all()) {
      if (c.label() == label) return c;
    }
    fail(ErrorKind::Parse, "unknown condition label '" + std::string(label) + "'");
  }
};

inline std::string_view to_string(Emotion e) { return e == Emotion::Negative ? "Negative" : "Neutral"; }

inline Emotion parse_emotion(std::string_view s) {
  if (s == "Negative") return Emotion::Negative;
  if (s == "Neutral") return Emotion::Neutral;
  fail(ErrorKind::Parse, "bad valence label '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------

enum class Language : std::uint8_t { EN, IT, DE, FR };

inline std::string_view to_string(Language l) {
  switch (l) {
    case Language::EN: return "EN";
    case Language::IT: return "IT";
    case Language::DE: return "DE";
    case Language::FR: return "FR";
  }
  return "EN";
}

inline Language parse_language(std::string_view s) {
  if (s == "EN") return Language::EN;
  if (s == "IT") return Language::IT;
  if (s == "DE") return Language::DE;
  if (s == "FR") return Language::FR;
  fail(ErrorKind::Validation, "unsupported language '" + std::string(s) + "'");
}

struct Stimulus {
  std::string stimulus_id;
  Emotion valence_class = Emotion::Negative;
  std::string image_path;
  std::optional<double> image_scale_override;

  friend bool operator==(const Stimulus&, const Stimulus&) = default;
};

// Slider position 1..9; the remapped -2..+2 value is always derived.
class AffectRating {
 public:
  static AffectRating from_raw(int raw) {
    require(raw >= 1 && raw <= 9, ErrorKind::Validation,
            "rating " + std::to_string(raw) + " outside the 1..9 slider range");
    return AffectRating(raw);
  }

  int raw() const { return raw_; }
  double remapped() const { return (raw_ - 5) / 2.0; }

  friend bool operator==(const AffectRating&, const AffectRating&) = default;

 private:
  explicit AffectRating(int raw) : raw_(raw) {}
  int raw_;
};

inline double remap_rating(int raw) { return AffectRating::from_raw(raw).remapped(); }

struct TranscriptBundle {
  Language source_language = Language::EN;
  std::string raw_text;
  std::string english_text;
  int word_count = 0;
  // Absent when the utterance has no scorable sentence (e.g. silence).
  std::optional<double> reading_ease;

  friend bool operator==(const TranscriptBundle&, const TranscriptBundle&) = default;
};

inline int whitespace_word_count(std::string_view text) {
  int count = 0;
  bool in_word = false;
  for (char c : text) {
    const bool space = c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
    if (!space && !in_word) ++count;
    in_word = !space;
  }
  return count;
}

struct EmbeddingVector {
  std::vector<double> values;

  std::size_t dim() const { return values.size(); }
  double norm() const {
    double s = 0.0;
    for (double v : values) s += v * v;
    return std::sqrt(s);
  }

  friend bool operator==(const EmbeddingVector&, const EmbeddingVector&) = default;
};

inline constexpr double kDefaultTextGuidance = 7.5;
inline constexpr int kDefaultDenoiseSteps = 40;
inline constexpr double kDefaultImageScale = 0.5;

struct GenerationRequest {
  std::string prompt;
  Stimulus reference_image;
  double image_scale = kDefaultImageScale;
  double text_guidance = kDefaultTextGuidance;
  int denoise_steps = kDefaultDenoiseSteps;
  std::uint64_t seed = 0;

  void validate() const {
    require(image_scale >= 0.0 && image_scale <= 1.0, ErrorKind::Validation,
            "image_scale must lie in [0,1]");
    require(denoise_steps >= 1, ErrorKind::Validation, "denoise_steps must be >= 1");
  }
};

enum class Backend : std::uint8_t { Mock, Remote };

inline std::string_view to_string(Backend b) { return b == Backend::Mock ? "Mock" : "Remote"; }

struct ArtifactRef {
  std::string artifact_id;  // sha256 of the artifact bytes
  std::string path;

  friend bool operator==(const ArtifactRef&, const ArtifactRef&) = default;
};

struct GenerationResult {
  ArtifactRef image_ref;
  EmbeddingVector output_embedding;
  std::int64_t latency_ms = 0;
  Backend backend = Backend::Mock;

  friend bool operator==(const GenerationResult&, const GenerationResult&) = default;
};

// Parameters actually sent with a trial's generation request.
struct GenerationParams {
  double image_scale = kDefaultImageScale;
  double text_guidance = kDefaultTextGuidance;
  int denoise_steps = kDefaultDenoiseSteps;
  std::uint64_t seed = 0;

  friend bool operator==(const GenerationParams&, const GenerationParams&) = default;
};

struct SentimentProbabilities {
  double p_negative = 0.0;
  double p_neutral = 1.0;
  double p_positive = 0.0;

  friend bool operator==(const SentimentProbabilities&, const SentimentProbabilities&) = default;
};

enum class CaptionSource : std::uint8_t { Primary, Fallback };

struct CaptionResult {
  std::string text;
  CaptionSource source = CaptionSource::Primary;

  friend bool operator==(const CaptionResult&, const CaptionResult&) = default;
};

enum class Phase : std::uint8_t { View, Speak, Gray, GeneratedImage, Rating };

inline std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::View: return "View";
    case Phase::Speak: return "Speak";
    case Phase::Gray: return "Gray";
    case Phase::GeneratedImage: return "GeneratedImage";
    case Phase::Rating: return "Rating";
  }
  return "View";
}

inline Phase parse_phase(std::string_view s) {
  for (auto p : {Phase::View, Phase::Speak, Phase::Gray, Phase::GeneratedImage, Phase::Rating}) {
    if (to_string(p) == s) return p;
  }
  fail(ErrorKind::Parse, "unknown phase '" + std::string(s) + "'");
}

struct PhaseSpan {
  Phase phase = Phase::View;
  std::int64_t start_ms = 0;
  std::int64_t end_ms = 0;

  std::int64_t duration_ms() const { return end_ms - start_ms; }
  friend bool operator==(const PhaseSpan&, const PhaseSpan&) = default;
};

enum class TrialFlag : std::uint8_t {
  GenerationLate,
  GenerationFailed,
  CaptionUnavailable,
  RatingTimeout,
  TranscriptionFailed,
};

inline std::string_view to_string(TrialFlag f) {
  switch (f) {
    case TrialFlag::GenerationLate: return "generation_late";
    case TrialFlag::GenerationFailed: return "generation_failed";
    case TrialFlag::CaptionUnavailable: return "caption_unavailable";
    case TrialFlag::RatingTimeout: return "rating_timeout";
    case TrialFlag::TranscriptionFailed: return "transcription_failed";
  }
  return "unknown";
}

inline TrialFlag parse_flag(std::string_view s) {
  for (auto f : {TrialFlag::GenerationLate, TrialFlag::GenerationFailed, TrialFlag::CaptionUnavailable,
                 TrialFlag::RatingTimeout, TrialFlag::TranscriptionFailed}) {
    if (to_string(f) == s) return f;
  }
  fail(ErrorKind::Parse, "unknown trial flag '" + std::string(s) + "'");
}

struct TrialRecord {
  int trial_index = 0;
  Condition condition;
  Stimulus stimulus;
  std::optional<TranscriptBundle> transcript;
  std::optional<GenerationParams> generation_params;
  std::optional<GenerationResult> generation;
  // Absent only when the rating deadline expired (flag rating_timeout).
  std::optional<AffectRating> rating;
  std::vector<PhaseSpan> phase_timestamps;
  std::set<TrialFlag> flags;

  // Analysis annotations computed after the rating is collected.
  std::optional<SentimentProbabilities> sentiment;
  std::optional<CaptionResult> caption;
  std::optional<double> alignment;

  bool has(TrialFlag f) const { return flags.contains(f); }
  friend bool operator==(const TrialRecord&, const TrialRecord&) = default;
};

inline constexpr int kSessionFormatVersion = 1;

struct SessionRecord {
  std::string session_id;
  std::string subject_id;
  Language language = Language::EN;
  std::uint64_t seed = 0;
  std::string created_at;
  json stamp = json::object();
  std::vector<TrialRecord> trials;

  friend bool operator==(const SessionRecord&, const SessionRecord&) = default;
};

// ---------------------------------------------------------------------------
// JSON encoding. Absent optionals are omitted; keys are emitted sorted, so
// encoding is canonical and re-encoding a decoded record is byte-identical.

inline void to_json(json& j, const Stimulus& s) {
  j = json{{"stimulus_id", s.stimulus_id},
           {"valence_class", to_string(s.valence_class)},
           {"image_path", s.image_path}};
  if (s.image_scale_override) j["image_scale_override"] = *s.image_scale_override;
}

inline void from_json(const json& j, Stimulus& s) {
  s.stimulus_id = j.at("stimulus_id").get<std::string>();
  s.valence_class = parse_emotion(j.at("valence_class").get<std::string>());
  s.image_path = j.at("image_path").get<std::string>();
  s.image_scale_override.reset();
  if (auto it = j.find("image_scale_override"); it != j.end() && !it->is_null()) {
    s.image_scale_override = it->get<double>();
  }
}

inline void to_json(json& j, const TranscriptBundle& t) {
  j = json{{"source_language", to_string(t.source_language)},
           {"raw_text", t.raw_text},
           {"english_text", t.english_text},
           {"word_count", t.word_count}};
  if (t.reading_ease) j["reading_ease"] = *t.reading_ease;
}

inline void from_json(const json& j, TranscriptBundle& t) {
  t.source_language = parse_language(j.at("source_language").get<std::string>());
  t.raw_text = j.at("raw_text").get<std::string>();
  t.english_text = j.at("english_text").get<std::string>();
  t.word_count = j.at("word_count").get<int>();
  t.reading_ease.reset();
  if (auto it = j.find("reading_ease"); it != j.end() && !it->is_null()) t.reading_ease = it->get<double>();
}

inline void to_json(json& j, const EmbeddingVector& e) { j = e.values; }
inline void from_json(const json& j, EmbeddingVector& e) { e.values = j.get<std::vector<double>>(); }

inline void to_json(json& j, const GenerationParams& g) {
  j = json{{"image_scale", g.image_scale},
           {"text_guidance", g.text_guidance},
           {"denoise_steps", g.denoise_steps},
           {"seed", g.seed}};
}

inline void from_json(const json& j, GenerationParams& g) {
  g.image_scale = j.at("image_scale").get<double>();
  g.text_guidance = j.at("text_guidance").get<double>();
  g.denoise_steps = j.at("denoise_steps").get<int>();
  g.seed = j.at("seed").get<std::uint64_t>();
}

inline void to_json(json& j, const GenerationResult& g) {
  j = json{{"image_ref", {{"artifact_id", g.image_ref.artifact_id}, {"path", g.image_ref.path}}},
           {"output_embedding", g.output_embedding},
           {"latency_ms", g.latency_ms},
           {"backend", to_string(g.backend)}};
}

inline void from_json(const json& j, GenerationResult& g) {
  const auto& ref = j.at("image_ref");
  g.image_ref.artifact_id = ref.at("artifact_id").get<std::string>();
  g.image_ref.path = ref.at("path").get<std::string>();
  g.output_embedding = j.at("output_embedding").get<EmbeddingVector>();
  g.latency_ms = j.at("latency_ms").get<std::int64_t>();
  const auto backend = j.at("backend").get<std::string>();
  if (backend == "Mock") g.backend = Backend::Mock;
  else if (backend == "Remote") g.backend = Backend::Remote;
  else fail(ErrorKind::Parse, "unknown backend '" + backend + "'");
}

inline void to_json(json& j, const SentimentProbabilities& p) {
  j = json{{"p_negative", p.p_negative}, {"p_neutral", p.p_neutral}, {"p_positive", p.p_positive}};
}

inline void from_json(const json& j, SentimentProbabilities& p) {
  p.p_negative = j.at("p_negative").get<double>();
  p.p_neutral = j.at("p_neutral").get<double>();
  p.p_positive = j.at("p_positive").get<double>();
}

inline void to_json(json& j, const CaptionResult& c) {
  j = json{{"text", c.text}, {"source", c.source == CaptionSource::Primary ? "Primary" : "Fallback"}};
}

inline void from_json(const json& j, CaptionResult& c) {
  c.text = j.at("text").get<std::string>();
  const auto source = j.at("source").get<std::string>();
  if (source == "Primary") c.source = CaptionSource::Primary;
  else if (source == "Fallback") c.source = CaptionSource::Fallback;
  else fail(ErrorKind::Parse, "unknown caption source '" + source + "'");
}

inline void to_json(json& j, const PhaseSpan& p) {
  j = json{{"phase", to_string(p.phase)}, {"start_ms", p.start_ms}, {"end_ms", p.end_ms}};
}

inline void from_json(const json& j, PhaseSpan& p) {
  p.phase = parse_phase(j.at("phase").get<std::string>());
  p.start_ms = j.at("start_ms").get<std::int64_t>();
  p.end_ms = j.at("end_ms").get<std::int64_t>();
}

inline void to_json(json& j, const TrialRecord& t) {
  j = json{{"record", "trial"},
           {"trial_index", t.trial_index},
           {"condition", t.condition.label()},
           {"stimulus", t.stimulus},
           {"phase_timestamps", t.phase_timestamps}};
  json flags = json::array();
  for (auto f : t.flags) flags.push_back(to_string(f));
  j["flags"] = std::move(flags);
  if (t.transcript) j["transcript"] = *t.transcript;
  if (t.generation_params) j["generation_params"] = *t.generation_params;
  if (t.generation) j["generation"] = *t.generation;
  if (t.rating) j["rating"] = json{{"raw", t.rating->raw()}, {"remapped", t.rating->remapped()}};
  if (t.sentiment) j["sentiment"] = *t.sentiment;
  if (t.caption) j["caption"] = *t.caption;
  if (t.alignment) j["alignment"] = *t.alignment;
}

inline void from_json(const json& j, TrialRecord& t) {
  t = TrialRecord{};
  t.trial_index = j.at("trial_index").get<int>();
  t.condition = Condition::parse(j.at("condition").get<std::string>());
  t.stimulus = j.at("stimulus").get<Stimulus>();
  t.phase_timestamps = j.at("phase_timestamps").get<std::vector<PhaseSpan>>();
  for (const auto& f : j.at("flags")) t.flags.insert(parse_flag(f.get<std::string>()));
  if (auto it = j.find("transcript"); it != j.end()) t.transcript = it->get<TranscriptBundle>();
  if (auto it = j.find("generation_params"); it != j.end()) t.generation_params = it->get<GenerationParams>();
  if (auto it = j.find("generation"); it != j.end()) t.generation = it->get<GenerationResult>();
  // The stored "remapped" value is never trusted; it is recomputed from raw.
  if (auto it = j.find("rating"); it != j.end()) t.rating = AffectRating::from_raw(it->at("raw").get<int>());
  if (auto it = j.find("sentiment"); it != j.end()) t.sentiment = it->get<SentimentProbabilities>();
  if (auto it = j.find("caption"); it != j.end()) t.caption = it->get<CaptionResult>();
  if (auto it = j.find("alignment"); it != j.end()) t.alignment = it->get<double>();
}

inline json session_header_json(const SessionRecord& s) {
  return json{{"record", "session"},
              {"format_version", kSessionFormatVersion},
              {"session_id", s.session_id},
              {"subject_id", s.subject_id},
              {"language", to_string(s.language)},
              {"seed", s.seed},
              {"created_at", s.created_at},
              {"stamp", s.stamp}};
}

inline SessionRecord session_header_from_json(const json& j) {
  require(j.value("record", "") == "session", ErrorKind::Parse, "first line is not a session header");
  const int version = j.at("format_version").get<int>();
  require(version == kSessionFormatVersion, ErrorKind::Parse,
          "unsupported session format_version " + std::to_string(version));
  SessionRecord s;
  s.session_id = j.at("session_id").get<std::string>();
  s.subject_id = j.at("subject_id").get<std::string>();
  s.language = parse_language(j.at("language").get<std::string>());
  s.seed = j.at("seed").get<std::uint64_t>();
  s.created_at = j.at("created_at").get<std::string>();
  s.stamp = j.value("stamp", json::object());
  return s;
}

inline std::string encode_trial_line(const TrialRecord& t) { return json(t).dump(); }
inline std::string encode_header_line(const SessionRecord& s) { return session_header_json(s).dump(); }

// Whole session as JSON Lines text: header line, then one line per trial.
inline std::string encode_session(const SessionRecord& s) {
  std::string out = encode_header_line(s);
  out += '\n';
  for (const auto& t : s.trials) {
    out += encode_trial_line(t);
    out += '\n';
  }
  return out;
}

inline SessionRecord decode_session(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::optional<SessionRecord> session;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      fail(ErrorKind::Parse, "line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!session) {
      session = session_header_from_json(j);
      continue;
    }
    session->trials.push_back(j.get<TrialRecord>());
  }
  require(session.has_value(), ErrorKind::Parse, "session text has no header line");
  return *session;
}

// ---------------------------------------------------------------------------
// Validation: violations are data, not faults.

struct Violation {
  std::optional<int> trial_index;
  std::string message;

  std::string describe() const {
    return trial_index ? "trial " + std::to_string(*trial_index) + ": " + message : message;
  }
};

inline std::vector<Phase> expected_phases(const TrialRecord& t) {
  std::vector<Phase> phases{Phase::View, Phase::Speak, Phase::Gray};
  if (t.condition.is_ai() && t.generation) phases.push_back(Phase::GeneratedImage);
  phases.push_back(Phase::Rating);
  return phases;
}

inline std::vector<Violation> validate_session(const SessionRecord& record) {
  std::vector<Violation> out;
  std::set<int> seen_index;
  std::set<std::string> seen_stimulus;
  std::optional<std::size_t> embedding_dim;

  for (const auto& t : record.trials) {
    const int idx = t.trial_index;
    auto add = [&](std::string msg) { out.push_back({idx, std::move(msg)}); };

    if (!seen_index.insert(idx).second) add("duplicate trial_index");
    if (!seen_stimulus.insert(t.stimulus.stimulus_id).second) {
      add("stimulus '" + t.stimulus.stimulus_id + "' used more than once");
    }
    if (t.stimulus.valence_class != t.condition.emotion) {
      add("stimulus valence does not match condition " + t.condition.label());
    }

    const bool failed = t.has(TrialFlag::GenerationFailed);
    if (t.condition.is_ai()) {
      if (!t.generation && !failed) add("AI-modality trial has no generation result");
      if (t.generation && failed) add("generation present on a trial flagged generation_failed");
    } else if (t.generation || t.generation_params) {
      add("NoAI trial carries a generation");
    }
    if (t.generation) {
      if (t.generation->latency_ms < 0) add("negative generation latency");
      const auto& emb = t.generation->output_embedding;
      if (emb.dim() == 0) {
        add("empty output embedding");
      } else {
        if (!std::isfinite(emb.norm())) add("non-finite output embedding");
        if (embedding_dim && *embedding_dim != emb.dim()) add("embedding dimension changed within session");
        embedding_dim = emb.dim();
      }
    }
    if (t.generation_params) {
      const auto& g = *t.generation_params;
      if (g.image_scale < 0.0 || g.image_scale > 1.0) add("image_scale outside [0,1]");
      if (g.denoise_steps < 1) add("denoise_steps < 1");
    }

    if (!t.rating && !t.has(TrialFlag::RatingTimeout)) add("rating missing");

    if (t.transcript) {
      const auto& tr = *t.transcript;
      if (tr.source_language == Language::EN && tr.english_text != tr.raw_text) {
        add("English transcript altered after recognition");
      }
      if (tr.word_count != whitespace_word_count(tr.english_text)) add("word_count mismatch");
    }

    if (t.sentiment) {
      const auto& p = *t.sentiment;
      const double sum = p.p_negative + p.p_neutral + p.p_positive;
      if (std::abs(sum - 1.0) > 1e-6) add("sentiment probabilities do not sum to 1");
    }

    const auto expected = expected_phases(t);
    bool order_ok = expected.size() == t.phase_timestamps.size();
    for (std::size_t i = 0; order_ok && i < expected.size(); ++i) {
      order_ok = expected[i] == t.phase_timestamps[i].phase;
    }
    if (!order_ok) add("phase order does not match the protocol for " + t.condition.label());
    std::int64_t prev_end = INT64_MIN;
    for (const auto& span : t.phase_timestamps) {
      if (span.end_ms < span.start_ms || span.start_ms < prev_end) {
        add("phase timestamps not monotonic");
        break;
      }
      prev_end = span.end_ms;
    }
  }

  int expect = 0;
  for (int idx : seen_index) {
    if (idx != expect) {
      out.push_back({std::nullopt, "trial_index values are not contiguous from 0"});
      break;
    }
    ++expect;
  }
  return out;
}

}  // namespace rlab
