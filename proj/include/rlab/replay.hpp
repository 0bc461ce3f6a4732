#pragma once

// Re-derives the analysis inputs of a stored session (remapped ratings,
// text covariates, sentiment, alignment, artifact hashes) and reports every
// field whose stored value disagrees with the recomputation.

#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rlab/clients.hpp"
#include "rlab/codec.hpp"
#include "rlab/domain.hpp"
#include "rlab/storage.hpp"
#include "rlab/text_metrics.hpp"

namespace rlab::replay {

struct Mismatch {
  int trial_index = 0;
  std::string field;
  std::string stored;
  std::string recomputed;
};

struct ReplayReport {
  std::string session_id;
  std::size_t trials = 0;
  std::vector<Mismatch> mismatches;
  std::vector<std::string> missing_artifacts;
  std::vector<std::string> warnings;
  std::vector<Violation> violations;

  bool partial() const { return !missing_artifacts.empty(); }
  bool clean() const { return mismatches.empty() && violations.empty() && !partial(); }
};

struct ReplayOptions {
  double tolerance = 1e-9;
  bool recaption = false;  // ask the captioner again and compare text
};

namespace detail {

inline bool close(double a, double b, double tol) { return std::abs(a - b) <= tol * std::max(1.0, std::abs(b)); }

inline std::string num(double v) { return storage::format_number(v); }

}  // namespace detail

// `session_text` is the raw file content; the stored "remapped" value is only
// visible there because decoding always recomputes it.
inline ReplayReport replay_session(std::string_view session_text, const clients::ServiceSuite& services,
                                   const storage::ArtifactStore& artifacts, const ReplayOptions& opts = {}) {
  const auto file = storage::parse_session_text(session_text);
  const auto& session = file.record;
  ReplayReport rep;
  rep.session_id = session.session_id;
  rep.trials = session.trials.size();
  rep.warnings = file.warnings;
  rep.violations = validate_session(session);

  // Stored remapped values, line by line.
  std::vector<std::optional<double>> stored_remapped;
  {
    std::size_t pos = 0;
    bool header = true;
    while (pos < session_text.size()) {
      auto nl = session_text.find('\n', pos);
      if (nl == std::string_view::npos) nl = session_text.size();
      const auto line = session_text.substr(pos, nl - pos);
      pos = nl + 1;
      if (line.empty()) continue;
      if (header) {
        header = false;
        continue;
      }
      const auto j = json::parse(line, nullptr, false);
      if (j.is_discarded()) break;
      if (auto it = j.find("rating"); it != j.end() && it->contains("remapped")) {
        stored_remapped.push_back(it->at("remapped").get<double>());
      } else {
        stored_remapped.push_back(std::nullopt);
      }
    }
  }

  const double tol = opts.tolerance;
  for (std::size_t i = 0; i < session.trials.size(); ++i) {
    const auto& t = session.trials[i];
    auto add = [&](std::string field, std::string stored, std::string recomputed) {
      rep.mismatches.push_back({t.trial_index, std::move(field), std::move(stored), std::move(recomputed)});
    };

    if (t.rating && i < stored_remapped.size() && stored_remapped[i] &&
        !detail::close(*stored_remapped[i], t.rating->remapped(), 0.0)) {
      add("rating.remapped", detail::num(*stored_remapped[i]), detail::num(t.rating->remapped()));
    }

    if (t.transcript) {
      const auto& tr = *t.transcript;
      const int wc = whitespace_word_count(tr.english_text);
      if (wc != tr.word_count) add("transcript.word_count", std::to_string(tr.word_count), std::to_string(wc));
      const auto counts = text::readability_counts(tr.english_text);
      std::optional<double> ease;
      if (counts.words >= 1 && counts.sentences >= 1) ease = text::flesch_reading_ease(tr.english_text);
      if (ease.has_value() != tr.reading_ease.has_value() ||
          (ease && !detail::close(*ease, *tr.reading_ease, tol))) {
        add("transcript.reading_ease", tr.reading_ease ? detail::num(*tr.reading_ease) : "absent",
            ease ? detail::num(*ease) : "absent");
      }
      if (tr.source_language == Language::EN && tr.english_text != tr.raw_text) {
        add("transcript.english_text", tr.english_text, tr.raw_text);
      }

      if (!tr.english_text.empty()) {
        try {
          const auto p = services.sentiment.classify(tr.english_text).value;
          if (!t.sentiment) {
            add("sentiment", "absent", detail::num(text::sentiment_score(p)));
          } else if (!detail::close(t.sentiment->p_negative, p.p_negative, tol) ||
                     !detail::close(t.sentiment->p_neutral, p.p_neutral, tol) ||
                     !detail::close(t.sentiment->p_positive, p.p_positive, tol)) {
            add("sentiment", detail::num(text::sentiment_score(*t.sentiment)), detail::num(text::sentiment_score(p)));
          }
        } catch (const Error& e) {
          rep.warnings.push_back("trial " + std::to_string(t.trial_index) + ": sentiment not recomputed: " + e.what());
        }
      }
    }

    if (t.generation) {
      const auto bytes = artifacts.get(t.generation->image_ref);
      if (!bytes) {
        rep.missing_artifacts.push_back(t.generation->image_ref.artifact_id);
        rep.warnings.push_back("trial " + std::to_string(t.trial_index) + ": artifact " +
                               t.generation->image_ref.artifact_id + " missing; partial replay");
      } else {
        const auto hash = codec::sha256_hex(*bytes);
        if (hash != t.generation->image_ref.artifact_id) add("generation.image_ref", t.generation->image_ref.artifact_id, hash);
        if (opts.recaption && t.caption) {
          try {
            const auto c = services.caption.caption(*bytes).value;
            if (c.text != t.caption->text) add("caption.text", t.caption->text, c.text);
          } catch (const Error& e) {
            rep.warnings.push_back("trial " + std::to_string(t.trial_index) + ": caption not recomputed: " + e.what());
          }
        }
      }
    }

    if (t.caption && t.transcript && !t.transcript->english_text.empty()) {
      try {
        const auto r = services.embedding.embed(t.transcript->english_text).value;
        const auto c = services.embedding.embed(t.caption->text).value;
        const double a = text::cosine_alignment(r, c);
        if (!t.alignment) add("alignment", "absent", detail::num(a));
        else if (!detail::close(*t.alignment, a, tol)) add("alignment", detail::num(*t.alignment), detail::num(a));
      } catch (const Error& e) {
        rep.warnings.push_back("trial " + std::to_string(t.trial_index) + ": alignment not recomputed: " + e.what());
      }
    }
  }
  return rep;
}

inline json to_json(const ReplayReport& r) {
  json mm = json::array();
  for (const auto& m : r.mismatches) {
    mm.push_back({{"trial_index", m.trial_index}, {"field", m.field}, {"stored", m.stored}, {"recomputed", m.recomputed}});
  }
  json viol = json::array();
  for (const auto& v : r.violations) viol.push_back(v.describe());
  return json{{"session_id", r.session_id},
              {"trials", r.trials},
              {"mismatches", mm},
              {"missing_artifacts", r.missing_artifacts},
              {"warnings", r.warnings},
              {"violations", viol},
              {"partial", r.partial()}};
}

}  // namespace rlab::replay
