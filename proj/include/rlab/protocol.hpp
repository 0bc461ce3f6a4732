#pragma once

// Timed trial state machine and session sequencing.
//
// Phases run on an injected monotonic Clock. In AI trials the speech,
// translation and generation calls are launched when the Speak phase ends
// and run alongside the Gray phase; the generated image is shown only once it
// is ready, extending Gray (flag generation_late) when it is not ready in
// time. On a virtual clock the pipeline runs deferred and its reported
// elapsed time decides readiness, so runs are exactly reproducible.

#include <chrono>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <optional>
#include <stop_token>
#include <string>
#include <thread>
#include <vector>

#include "rlab/clients.hpp"
#include "rlab/clock.hpp"
#include "rlab/domain.hpp"
#include "rlab/error.hpp"
#include "rlab/rng.hpp"
#include "rlab/storage.hpp"
#include "rlab/text_metrics.hpp"

namespace rlab::protocol {

struct PhaseSchedule {
  std::int64_t view_ms = 4000;
  std::int64_t speak_ms = 12000;
  std::int64_t gray_ms = 4000;
  std::int64_t generated_view_ms = 3000;
  std::optional<std::int64_t> rating_timeout_ms;  // self-paced when absent
  std::int64_t inter_trial_ms = 1000;

  void validate() const {
    require(view_ms > 0 && speak_ms > 0 && gray_ms > 0 && generated_view_ms > 0, ErrorKind::Validation,
            "phase durations must be > 0");
    require(!rating_timeout_ms || *rating_timeout_ms > 0, ErrorKind::Validation, "rating_timeout_ms must be > 0");
    require(inter_trial_ms >= 0, ErrorKind::Validation, "inter_trial_ms must be >= 0");
  }

  // Scheduled time from trial start to the end of Gray; identical for
  // NoAI and AI trials.
  std::int64_t pre_rating_path_ms(const Condition&) const { return view_ms + speak_ms + gray_ms; }
};

inline void to_json(json& j, const PhaseSchedule& s) {
  j = json{{"view_ms", s.view_ms},
           {"speak_ms", s.speak_ms},
           {"gray_ms", s.gray_ms},
           {"generated_view_ms", s.generated_view_ms},
           {"inter_trial_ms", s.inter_trial_ms}};
  if (s.rating_timeout_ms) j["rating_timeout_ms"] = *s.rating_timeout_ms;
}

inline void from_json(const json& j, PhaseSchedule& s) {
  s.view_ms = j.value("view_ms", s.view_ms);
  s.speak_ms = j.value("speak_ms", s.speak_ms);
  s.gray_ms = j.value("gray_ms", s.gray_ms);
  s.generated_view_ms = j.value("generated_view_ms", s.generated_view_ms);
  s.inter_trial_ms = j.value("inter_trial_ms", s.inter_trial_ms);
  if (auto it = j.find("rating_timeout_ms"); it != j.end() && !it->is_null()) s.rating_timeout_ms = it->get<std::int64_t>();
  s.validate();
}

// ---------------------------------------------------------------------------
// Planning

inline constexpr int kDefaultTrialsPerCell = 10;

struct PlannedTrial {
  Condition condition;
  Stimulus stimulus;

  friend bool operator==(const PlannedTrial&, const PlannedTrial&) = default;
};

struct TrialPlan {
  std::vector<PlannedTrial> trials;
  std::uint64_t randomization_seed = 0;
  int trials_per_cell = 0;

  friend bool operator==(const TrialPlan&, const TrialPlan&) = default;
};

// Blocked-random plan: stimuli of each valence are shuffled and dealt to the
// four cells of that valence; the session is then trials_per_cell blocks,
// each holding all eight cells once in shuffled order.
inline TrialPlan plan_session(const std::vector<Stimulus>& manifest, int trials_per_cell, std::uint64_t seed) {
  require(trials_per_cell >= 0, ErrorKind::Validation, "trials_per_cell must be >= 0");
  const auto k = static_cast<std::size_t>(trials_per_cell);

  std::array<std::vector<std::size_t>, kCellCount> dealt;  // stimulus indices per cell
  for (auto valence : {Emotion::Negative, Emotion::Neutral}) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < manifest.size(); ++i) {
      if (manifest[i].valence_class == valence) pool.push_back(i);
    }
    std::vector<std::string> cells;
    for (const auto& c : Condition::all()) {
      if (c.emotion == valence) cells.push_back(c.label());
    }
    if (pool.size() < 4 * k) {
      std::string names;
      for (const auto& c : cells) names += (names.empty() ? "" : ", ") + c;
      fail(ErrorKind::Planning, "insufficient " + std::string(to_string(valence)) + " stimuli for cells " + names +
                                    ": need " + std::to_string(4 * k) + ", manifest has " + std::to_string(pool.size()));
    }
    Rng rng(derive_seed(seed, {0x706c616eULL, static_cast<std::uint64_t>(valence)}));
    rng.shuffle(pool);
    std::size_t next = 0;
    for (const auto& c : Condition::all()) {
      if (c.emotion != valence) continue;
      for (std::size_t t = 0; t < k; ++t) dealt[c.index()].push_back(pool[next++]);
    }
  }

  TrialPlan plan;
  plan.randomization_seed = seed;
  plan.trials_per_cell = trials_per_cell;
  Rng order(derive_seed(seed, {0x626c6f636bULL}));
  for (std::size_t block = 0; block < k; ++block) {
    std::array<std::size_t, kCellCount> cells{};
    for (std::size_t c = 0; c < kCellCount; ++c) cells[c] = c;
    order.shuffle(cells);
    for (auto c : cells) plan.trials.push_back({Condition::from_index(c), manifest[dealt[c][block]]});
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Participant-facing channel

struct PhaseAnnouncement {
  int trial_index = 0;
  Phase phase = Phase::View;
  std::int64_t start_ms = 0;
  std::optional<std::int64_t> deadline_ms;  // absent for a self-paced rating
  Condition condition;
  Stimulus stimulus;
  std::optional<ArtifactRef> artifact;  // GeneratedImage only
};

struct RatingResponse {
  int raw = 5;
  std::int64_t at_ms = 0;
};

class UiChannel {
 public:
  virtual ~UiChannel() = default;
  virtual bool connected() const = 0;
  virtual void announce(const PhaseAnnouncement& a) = 0;
  // PCM captured during the trial's Speak window; called once it has ended.
  virtual std::vector<std::uint8_t> take_audio(int trial_index) = 0;
  // Waits for the participant's rating. `partial` holds everything known
  // about the trial so far. Returns nullopt once `deadline_ms` passes.
  // Throws Error(Disconnected) if the participant goes away.
  virtual std::optional<RatingResponse> await_rating(const TrialRecord& partial, std::optional<std::int64_t> deadline_ms,
                                                     Clock& clock) = 0;
};

// Channel driven by callbacks; used by tests and scripted runs.
class ScriptedUi final : public UiChannel {
 public:
  using AudioFn = std::function<std::vector<std::uint8_t>(int trial_index)>;
  // Returns (raw rating, response delay in ms) or nullopt for no response.
  using RatingFn = std::function<std::optional<std::pair<int, std::int64_t>>(const TrialRecord&)>;

  ScriptedUi(AudioFn audio, RatingFn rating) : audio_(std::move(audio)), rating_(std::move(rating)) {}

  bool connected() const override { return !disconnect_at_ || rating_calls_ < *disconnect_at_; }
  void announce(const PhaseAnnouncement& a) override { log_.push_back(a); }
  std::vector<std::uint8_t> take_audio(int trial_index) override { return audio_(trial_index); }

  std::optional<RatingResponse> await_rating(const TrialRecord& partial, std::optional<std::int64_t> deadline_ms,
                                             Clock& clock) override {
    if (disconnect_at_ && rating_calls_ >= *disconnect_at_) fail(ErrorKind::Disconnected, "participant disconnected");
    ++rating_calls_;
    const auto r = rating_(partial);
    const std::int64_t start = clock.now_ms();
    if (!r || (deadline_ms && start + r->second > *deadline_ms)) {
      if (deadline_ms) clock.sleep_until(*deadline_ms);
      if (!deadline_ms) fail(ErrorKind::Disconnected, "no rating and no deadline");
      return std::nullopt;
    }
    clock.sleep_until(start + r->second);
    return RatingResponse{r->first, start + r->second};
  }

  // Disconnect when the n-th rating (0-based) is requested.
  void disconnect_at_rating(int n) { disconnect_at_ = n; }
  void reconnect() { disconnect_at_.reset(); }
  const std::vector<PhaseAnnouncement>& log() const { return log_; }

 private:
  AudioFn audio_;
  RatingFn rating_;
  std::vector<PhaseAnnouncement> log_;
  std::optional<int> disconnect_at_;
  int rating_calls_ = 0;
};

// ---------------------------------------------------------------------------
// Trial execution

struct GenerationDefaults {
  double image_scale = kDefaultImageScale;
  double text_guidance = kDefaultTextGuidance;
  int denoise_steps = kDefaultDenoiseSteps;
};

struct EngineContext {
  const clients::ServiceSuite& services;
  const storage::StimulusLoader& stimuli;
  storage::ArtifactStore& artifacts;
  Clock& clock;
  UiChannel& ui;
  Language language = Language::EN;
  std::uint64_t session_seed = 0;
  GenerationDefaults generation{};
  clients::AttemptLog* attempts = nullptr;
  std::stop_token stop{};
};

// The manifest override applies to Reappraise-AI trials only.
inline GenerationParams generation_params_for(const PlannedTrial& t, int trial_index, const EngineContext& ctx) {
  GenerationParams g;
  g.image_scale = ctx.generation.image_scale;
  if (t.condition.instruction == Instruction::Reappraise && t.condition.is_ai() && t.stimulus.image_scale_override) {
    g.image_scale = *t.stimulus.image_scale_override;
  }
  g.text_guidance = ctx.generation.text_guidance;
  g.denoise_steps = ctx.generation.denoise_steps;
  g.seed = derive_seed(ctx.session_seed, {0x67656eULL, static_cast<std::uint64_t>(trial_index)});
  return g;
}

namespace detail {

struct PipelineResult {
  std::optional<TranscriptBundle> transcript;
  bool transcription_failed = false;
  std::optional<GenerationResult> generation;
  std::vector<std::uint8_t> image;
  bool generation_failed = false;
  std::int64_t elapsed_ms = 0;  // time until the image (or failure) is known
  std::string error;
};

inline TranscriptBundle make_transcript(Language lang, std::string raw, std::string english) {
  TranscriptBundle t;
  t.source_language = lang;
  t.raw_text = std::move(raw);
  t.english_text = std::move(english);
  t.word_count = whitespace_word_count(t.english_text);
  const auto counts = text::readability_counts(t.english_text);
  if (counts.words >= 1 && counts.sentences >= 1) t.reading_ease = text::flesch_reading_ease(t.english_text);
  return t;
}

inline clients::CallContext call_context(const EngineContext& ctx, const std::stop_token& stop) {
  clients::CallContext cc;
  cc.stop = stop;
  cc.log = ctx.attempts;
  if (!ctx.clock.is_virtual()) {
    cc.sleep = [](std::int64_t ms) { std::this_thread::sleep_for(std::chrono::milliseconds(ms)); };
  }
  return cc;
}

inline PipelineResult run_pipeline(const EngineContext& ctx, const PlannedTrial& t, const GenerationParams* params,
                                   std::vector<std::uint8_t> audio, const std::vector<std::uint8_t>* reference,
                                   const std::stop_token& stop) {
  PipelineResult out;
  const auto cc = call_context(ctx, stop);
  try {
    std::string raw;
    if (!audio.empty()) {
      auto r = ctx.services.speech.transcribe(audio, ctx.language, cc);
      out.elapsed_ms += r.elapsed_ms;
      raw = std::move(r.value);
    }
    std::string english = raw;
    if (!raw.empty()) {
      auto tr = ctx.services.translation.translate(raw, ctx.language, cc);
      out.elapsed_ms += tr.elapsed_ms;
      english = std::move(tr.value);
    }
    out.transcript = make_transcript(ctx.language, std::move(raw), std::move(english));
  } catch (const ClientError& e) {
    out.elapsed_ms += e.elapsed_ms();
    out.transcription_failed = true;
    out.error = e.what();
  } catch (const Error& e) {
    out.transcription_failed = true;
    out.error = e.what();
  }

  if (!params) return out;
  if (!out.transcript || out.transcript->english_text.empty()) {
    out.generation_failed = true;
    if (out.error.empty()) out.error = "no spoken prompt to generate from";
    return out;
  }
  try {
    GenerationRequest req;
    req.prompt = out.transcript->english_text;
    req.reference_image = t.stimulus;
    req.image_scale = params->image_scale;
    req.text_guidance = params->text_guidance;
    req.denoise_steps = params->denoise_steps;
    req.seed = params->seed;
    auto g = ctx.services.generation.generate(req, *reference, cc);
    out.elapsed_ms += g.elapsed_ms;
    GenerationResult res;
    res.image_ref = ctx.artifacts.put(g.value.image);
    res.output_embedding = std::move(g.value.output_embedding);
    res.latency_ms = g.elapsed_ms;
    res.backend = g.value.backend;
    out.generation = std::move(res);
    out.image = std::move(g.value.image);
  } catch (const ClientError& e) {
    out.elapsed_ms += e.elapsed_ms();
    out.generation_failed = true;
    out.error = e.what();
  } catch (const Error& e) {
    out.generation_failed = true;
    out.error = e.what();
  }
  return out;
}

struct Annotation {
  std::optional<SentimentProbabilities> sentiment;
  std::optional<CaptionResult> caption;
  std::optional<double> alignment;
  bool caption_unavailable = false;
};

// Sentiment of the spoken text and, for AI trials with an image, caption
// plus prompt/caption alignment.
inline Annotation annotate(const EngineContext& ctx, const PipelineResult& p, const std::stop_token& stop) {
  Annotation a;
  const auto cc = call_context(ctx, stop);
  if (!p.transcript || p.transcript->english_text.empty()) return a;
  const auto& prompt = p.transcript->english_text;
  try {
    a.sentiment = ctx.services.sentiment.classify(prompt, cc).value;
  } catch (const Error&) {
  }
  if (!p.generation) return a;
  try {
    a.caption = ctx.services.caption.caption(p.image, clients::kCaptionInstruction, cc).value;
  } catch (const Error&) {
    a.caption_unavailable = true;
    return a;
  }
  try {
    const auto r = ctx.services.embedding.embed(prompt, cc).value;
    const auto c = ctx.services.embedding.embed(a.caption->text, cc).value;
    a.alignment = text::cosine_alignment(r, c);
  } catch (const Error&) {
  }
  return a;
}

inline void check_interrupt(const EngineContext& ctx) {
  if (ctx.stop.stop_requested()) fail(ErrorKind::Interrupted, "session interrupted");
  if (!ctx.ui.connected()) fail(ErrorKind::Disconnected, "participant disconnected");
}

}  // namespace detail

inline TrialRecord run_trial(int trial_index, const PlannedTrial& planned, const PhaseSchedule& schedule,
                             EngineContext& ctx) {
  schedule.validate();
  require(planned.stimulus.valence_class == planned.condition.emotion, ErrorKind::Planning,
          "stimulus '" + planned.stimulus.stimulus_id + "' does not match cell " + planned.condition.label());
  detail::check_interrupt(ctx);

  Clock& clock = ctx.clock;
  TrialRecord rec;
  rec.trial_index = trial_index;
  rec.condition = planned.condition;
  rec.stimulus = planned.stimulus;
  const bool ai = planned.condition.is_ai();

  std::optional<std::vector<std::uint8_t>> reference;
  if (ai) {
    reference = ctx.stimuli.load(planned.stimulus);
    require(reference.has_value(), ErrorKind::Io, "stimulus image missing: " + planned.stimulus.image_path);
    rec.generation_params = generation_params_for(planned, trial_index, ctx);
  }

  auto announce = [&](Phase ph, std::int64_t start, std::optional<std::int64_t> deadline,
                      std::optional<ArtifactRef> artifact = std::nullopt) {
    ctx.ui.announce({trial_index, ph, start, deadline, planned.condition, planned.stimulus, std::move(artifact)});
  };
  auto timed_phase = [&](Phase ph, std::int64_t start, std::int64_t duration,
                         std::optional<ArtifactRef> artifact = std::nullopt) {
    announce(ph, start, start + duration, std::move(artifact));
    clock.sleep_until(start + duration);
    rec.phase_timestamps.push_back({ph, start, start + duration});
    detail::check_interrupt(ctx);
    return start + duration;
  };

  const std::int64_t t0 = clock.now_ms();
  const std::int64_t view_end = timed_phase(Phase::View, t0, schedule.view_ms);
  const std::int64_t speak_end = timed_phase(Phase::Speak, view_end, schedule.speak_ms);

  // Launch at speech end.
  std::stop_source trial_stop;
  std::stop_callback forward(ctx.stop, [&] { trial_stop.request_stop(); });
  auto audio = ctx.ui.take_audio(trial_index);
  const auto launch_policy = clock.is_virtual() ? std::launch::deferred : std::launch::async;
  const GenerationParams* params = rec.generation_params ? &*rec.generation_params : nullptr;
  const auto* ref_ptr = reference ? &*reference : nullptr;
  auto pipeline = std::async(launch_policy, [&, params, ref_ptr, audio = std::move(audio)]() mutable {
    const auto stop = trial_stop.get_token();
    auto p = detail::run_pipeline(ctx, planned, params, std::move(audio), ref_ptr, stop);
    const std::int64_t known_at = clock.is_virtual() ? speak_end + p.elapsed_ms : clock.now_ms();
    return std::make_pair(std::move(p), known_at);
  });
  struct Abandon {
    std::future<std::pair<detail::PipelineResult, std::int64_t>>& f;
    std::stop_source& s;
    ~Abandon() {
      if (f.valid()) {
        s.request_stop();
        if (f.wait_for(std::chrono::seconds(0)) != std::future_status::deferred) f.wait();
      }
    }
  } abandon{pipeline, trial_stop};

  // Gray: nominal length, extended for AI trials until the image is known.
  const std::int64_t gray_nominal_end = speak_end + schedule.gray_ms;
  announce(Phase::Gray, speak_end, gray_nominal_end);
  clock.sleep_until(gray_nominal_end);
  detail::check_interrupt(ctx);
  std::int64_t gray_end = gray_nominal_end;
  detail::PipelineResult result;
  if (ai) {
    auto [res, known_at] = pipeline.get();
    result = std::move(res);
    if (known_at > gray_nominal_end) {
      clock.sleep_until(known_at);
      gray_end = std::max(known_at, clock.now_ms());
      rec.flags.insert(TrialFlag::GenerationLate);
      detail::check_interrupt(ctx);
    }
  }
  rec.phase_timestamps.push_back({Phase::Gray, speak_end, gray_end});

  std::optional<std::future<detail::Annotation>> annotation;
  auto apply_annotation = [&](detail::Annotation a) {
    rec.sentiment = a.sentiment;
    rec.caption = a.caption;
    rec.alignment = a.alignment;
    if (a.caption_unavailable) rec.flags.insert(TrialFlag::CaptionUnavailable);
  };
  auto take_transcript = [&] {
    if (result.transcription_failed) rec.flags.insert(TrialFlag::TranscriptionFailed);
    rec.transcript = result.transcript;
    annotation = std::async(launch_policy, [&, stop = trial_stop.get_token()] { return detail::annotate(ctx, result, stop); });
  };

  std::int64_t rating_start = gray_end;
  bool have_result = ai;
  if (ai) {
    if (result.generation) {
      rec.generation = result.generation;
      take_transcript();
      rating_start = timed_phase(Phase::GeneratedImage, gray_end, schedule.generated_view_ms, result.generation->image_ref);
    } else {
      rec.flags.insert(TrialFlag::GenerationFailed);
      take_transcript();
    }
  } else if (clock.is_virtual() || pipeline.wait_for(std::chrono::seconds(0)) == std::future_status::ready) {
    // NoAI transcription ran in the background; it never delays the rating.
    result = pipeline.get().first;
    have_result = true;
    take_transcript();
  }

  // Annotations already available are visible to the rating step.
  if (annotation &&
      (clock.is_virtual() || annotation->wait_for(std::chrono::seconds(0)) == std::future_status::ready)) {
    apply_annotation(annotation->get());
    annotation.reset();
  }

  std::optional<std::int64_t> deadline;
  if (schedule.rating_timeout_ms) deadline = rating_start + *schedule.rating_timeout_ms;
  announce(Phase::Rating, rating_start, deadline);
  const auto response = ctx.ui.await_rating(rec, deadline, clock);
  std::int64_t rating_end;
  if (response) {
    rec.rating = AffectRating::from_raw(response->raw);
    rating_end = std::max(rating_start, response->at_ms);
  } else {
    require(deadline.has_value(), ErrorKind::Disconnected, "rating channel closed without a rating");
    rec.flags.insert(TrialFlag::RatingTimeout);
    rating_end = *deadline;
  }
  clock.sleep_until(rating_end);
  rec.phase_timestamps.push_back({Phase::Rating, rating_start, rating_end});

  if (!have_result) {
    result = pipeline.get().first;
    take_transcript();
  }
  if (annotation) apply_annotation(annotation->get());
  return rec;
}

// ---------------------------------------------------------------------------
// Session execution

struct RunOptions {
  std::optional<int> max_trials;  // stop (paused) after this many trials in this run
  // Called after each trial has been persisted.
  std::function<void(const TrialRecord&)> on_trial;
  // Checked before each trial; true pauses the session there.
  std::function<bool()> pause_requested;
};

struct SessionOutcome {
  SessionRecord record;
  bool completed = false;
  int next_trial = 0;
  std::string pause_reason;
};

// Missing stimulus images are a hard error at session start.
inline void check_stimuli_available(const TrialPlan& plan, const storage::StimulusLoader& loader) {
  std::vector<std::string> missing;
  for (const auto& t : plan.trials) {
    if (t.condition.is_ai() && !loader.exists(t.stimulus)) missing.push_back(t.stimulus.stimulus_id);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    fail(ErrorKind::Io, "stimulus images missing for: " + list);
  }
}

// Runs the plan from `session.trials.size()` onward, appending each trial to
// `writer` (if given) before starting the next. A participant disconnect or
// an interrupt pauses the session; the trial in progress is discarded and
// is rerun on resume.
inline SessionOutcome run_session(const TrialPlan& plan, const PhaseSchedule& schedule, EngineContext& ctx,
                                  SessionRecord session, storage::SessionWriter* writer, const RunOptions& opts = {}) {
  schedule.validate();
  const std::size_t start = session.trials.size();
  require(start <= plan.trials.size(), ErrorKind::Planning, "session already has more trials than the plan");
  for (std::size_t i = 0; i < start; ++i) {
    const auto& done = session.trials[i];
    require(done.trial_index == static_cast<int>(i) && done.condition == plan.trials[i].condition &&
                done.stimulus.stimulus_id == plan.trials[i].stimulus.stimulus_id,
            ErrorKind::Planning, "recorded trial " + std::to_string(i) + " does not match the plan");
  }
  check_stimuli_available(plan, ctx.stimuli);

  SessionOutcome out;
  int run_count = 0;
  for (std::size_t i = start; i < plan.trials.size(); ++i) {
    out.next_trial = static_cast<int>(i);
    if (opts.max_trials && run_count >= *opts.max_trials) {
      out.pause_reason = "trial limit reached";
      out.record = std::move(session);
      return out;
    }
    if (opts.pause_requested && opts.pause_requested()) {
      out.pause_reason = "pause requested";
      out.record = std::move(session);
      return out;
    }
    try {
      if (i > start || start > 0) {
        ctx.clock.sleep_for(schedule.inter_trial_ms);
      }
      detail::check_interrupt(ctx);
      auto rec = run_trial(static_cast<int>(i), plan.trials[i], schedule, ctx);
      if (writer) writer->append_trial(rec);
      session.trials.push_back(std::move(rec));
      ++run_count;
      if (opts.on_trial) opts.on_trial(session.trials.back());
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Disconnected && e.kind() != ErrorKind::Interrupted) throw;
      out.pause_reason = e.what();
      out.record = std::move(session);
      return out;
    }
  }
  out.completed = true;
  out.next_trial = static_cast<int>(plan.trials.size());
  out.record = std::move(session);
  return out;
}

}  // namespace rlab::protocol
