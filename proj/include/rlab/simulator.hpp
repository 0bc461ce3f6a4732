#pragma once

// Synthetic participants driven through the real protocol engine on a
// virtual clock with the mock backends.
//
// Latent rating = baseline[cell] + gain * sentiment
//                 + (AI only) alignment_gain * alignment + N(0, noise_sd),
// quantized to the 1..9 slider after inverse remapping.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <future>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "rlab/clients.hpp"
#include "rlab/clock.hpp"
#include "rlab/domain.hpp"
#include "rlab/mock_clients.hpp"
#include "rlab/protocol.hpp"
#include "rlab/rng.hpp"
#include "rlab/storage.hpp"
#include "rlab/version.hpp"

namespace rlab::sim {

struct ParticipantModel {
  std::array<double, kCellCount> baseline_by_cell{};  // latent affect, remapped scale
  double sentiment_gain_ai = 0.0;
  double sentiment_gain_noai = 0.0;
  double alignment_gain = 0.0;
  double noise_sd = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    require(noise_sd >= 0.0 && std::isfinite(noise_sd), ErrorKind::Validation, "noise_sd must be >= 0");
    for (double b : baseline_by_cell) {
      require(b >= -2.0 && b <= 2.0, ErrorKind::Validation, "latent cell means must lie in [-2, 2]");
    }
  }

  double sentiment_gain(const Condition& c) const { return c.is_ai() ? sentiment_gain_ai : sentiment_gain_noai; }
};

// Between-subject variation applied by simulate_cohort.
struct CohortJitter {
  double intercept_sd = 0.35;  // shifts all cells of a subject
  double cell_sd = 0.05;       // subject x cell
  double gain_rel_sd = 0.1;    // gains scaled by (1 + N(0, sd))
};

struct ModelTemplate {
  ParticipantModel model;
  CohortJitter jitter;
};

inline void to_json(json& j, const ModelTemplate& t) {
  json base = json::object();
  for (std::size_t c = 0; c < kCellCount; ++c) base[Condition::from_index(c).label()] = t.model.baseline_by_cell[c];
  j = json{{"baseline_by_cell", base},
           {"sentiment_gain_ai", t.model.sentiment_gain_ai},
           {"sentiment_gain_noai", t.model.sentiment_gain_noai},
           {"alignment_gain", t.model.alignment_gain},
           {"noise_sd", t.model.noise_sd},
           {"jitter",
            {{"intercept_sd", t.jitter.intercept_sd},
             {"cell_sd", t.jitter.cell_sd},
             {"gain_rel_sd", t.jitter.gain_rel_sd}}}};
}

inline void from_json(const json& j, ModelTemplate& t) {
  const auto& base = j.at("baseline_by_cell");
  for (std::size_t c = 0; c < kCellCount; ++c) {
    const auto label = Condition::from_index(c).label();
    require(base.contains(label), ErrorKind::Validation, "model lacks baseline for " + label);
    t.model.baseline_by_cell[c] = base.at(label).get<double>();
  }
  t.model.sentiment_gain_ai = j.value("sentiment_gain_ai", 0.0);
  t.model.sentiment_gain_noai = j.value("sentiment_gain_noai", 0.0);
  t.model.alignment_gain = j.value("alignment_gain", 0.0);
  t.model.noise_sd = j.value("noise_sd", 0.5);
  if (auto it = j.find("jitter"); it != j.end()) {
    t.jitter.intercept_sd = it->value("intercept_sd", t.jitter.intercept_sd);
    t.jitter.cell_sd = it->value("cell_sd", t.jitter.cell_sd);
    t.jitter.gain_rel_sd = it->value("gain_rel_sd", t.jitter.gain_rel_sd);
  }
  t.model.validate();
}

// Target cell means (remapped scale): Neg D -1.1, DAI -1.05, R -0.5, RAI 0.3;
// Neu D 0.2, DAI 0.26, R 0.5, RAI 0.84. Baselines are those targets minus
// the expected sentiment and alignment terms of the default prompt bank,
// then nudged against 100 simulated cohorts.
inline ModelTemplate effect_template() {
  ModelTemplate t;
  t.model.sentiment_gain_ai = 0.6;
  t.model.sentiment_gain_noai = 0.15;
  t.model.alignment_gain = 0.4;
  t.model.noise_sd = 0.5;
  // Neg-D, Neg-DAI, Neg-R, Neg-RAI, Neu-D, Neu-DAI, Neu-R, Neu-RAI
  t.model.baseline_by_cell = {-1.03, -1.065, -0.6, -0.43, 0.2, -0.11, 0.4, 0.095};
  return t;
}

inline ModelTemplate null_template() {
  ModelTemplate t;
  t.model.baseline_by_cell.fill(0.0);
  t.model.noise_sd = 0.5;
  return t;
}

// Round half away from zero on the slider grid, then clamp to 1..9.
inline int quantize_rating(double latent) {
  const double x = 2.0 * latent + 5.0;
  const double r = x >= 0 ? std::floor(x + 0.5) : std::ceil(x - 0.5);
  return static_cast<int>(std::clamp(r, 1.0, 9.0));
}

// ---------------------------------------------------------------------------
// Prompt bank

struct PromptEntry {
  std::string text;
  SentimentProbabilities sentiment;
};

struct PromptBank {
  // Indexed by emotion * 2 + instruction.
  std::array<std::vector<PromptEntry>, 4> entries;

  static std::size_t slot(Emotion e, Instruction i) {
    return static_cast<std::size_t>(e) * 2 + static_cast<std::size_t>(i);
  }
  const std::vector<PromptEntry>& for_cell(const Condition& c) const { return entries[slot(c.emotion, c.instruction)]; }
  std::vector<PromptEntry>& for_cell(Emotion e, Instruction i) { return entries[slot(e, i)]; }
};

inline PromptBank default_prompt_bank() {
  PromptBank b;
  auto add = [&](Emotion e, Instruction i, std::string text, double neg, double neu, double pos) {
    b.for_cell(e, i).push_back({std::move(text), {neg, neu, pos}});
  };
  const auto N = Emotion::Negative;
  const auto U = Emotion::Neutral;
  const auto D = Instruction::Describe;
  const auto R = Instruction::Reappraise;

  add(N, D, "a man is lying on the ground and he looks injured", 0.70, 0.28, 0.02);
  add(N, D, "there is a car crash on the road with broken glass", 0.65, 0.33, 0.02);
  add(N, D, "a child is crying next to a broken window", 0.72, 0.25, 0.03);
  add(N, D, "the room is dirty and there is trash everywhere", 0.55, 0.42, 0.03);
  add(N, D, "a dog with a wound on its leg", 0.60, 0.37, 0.03);
  add(N, D, "people are standing near a burning house", 0.62, 0.35, 0.03);
  add(N, D, "an old woman sits alone in a dark room", 0.50, 0.45, 0.05);
  add(N, D, "a soldier holds a gun in a ruined street", 0.58, 0.39, 0.03);

  add(N, R, "this person will recover and the doctors are helping", 0.05, 0.25, 0.70);
  add(N, R, "help is on the way and everyone will be safe", 0.04, 0.21, 0.75);
  add(N, R, "the child is comforted by a kind neighbor", 0.05, 0.30, 0.65);
  add(N, R, "volunteers will clean the room and make it bright", 0.06, 0.30, 0.64);
  add(N, R, "the dog is healing and will play again soon", 0.04, 0.26, 0.70);
  add(N, R, "the firefighters saved the family and they are together", 0.05, 0.20, 0.75);
  add(N, R, "her friends are coming to visit and bring warm food", 0.03, 0.27, 0.70);
  add(N, R, "the war is over and people are rebuilding with hope", 0.08, 0.30, 0.62);

  add(U, D, "a cup of coffee on a wooden table", 0.03, 0.92, 0.05);
  add(U, D, "a man is walking down a street", 0.04, 0.90, 0.06);
  add(U, D, "there is a chair next to a window", 0.03, 0.93, 0.04);
  add(U, D, "a bus is parked at the station", 0.05, 0.90, 0.05);
  add(U, D, "some books are stacked on a shelf", 0.02, 0.93, 0.05);
  add(U, D, "a woman is reading a newspaper", 0.03, 0.90, 0.07);
  add(U, D, "a bowl of fruit in the kitchen", 0.02, 0.88, 0.10);
  add(U, D, "the building has many windows", 0.04, 0.91, 0.05);

  add(U, R, "the coffee smells wonderful and the morning is calm", 0.02, 0.30, 0.68);
  add(U, R, "he is walking to meet his friends for a happy lunch", 0.02, 0.25, 0.73);
  add(U, R, "the sunny window makes the room warm and peaceful", 0.02, 0.28, 0.70);
  add(U, R, "the bus will take everyone on a fun trip", 0.03, 0.32, 0.65);
  add(U, R, "these books hold stories full of joy", 0.02, 0.33, 0.65);
  add(U, R, "she is reading good news and smiling", 0.02, 0.23, 0.75);
  add(U, R, "fresh fruit will make a lovely healthy breakfast", 0.02, 0.30, 0.68);
  add(U, R, "the building is full of kind people helping each other", 0.03, 0.30, 0.67);
  return b;
}

inline void to_json(json& j, const PromptBank& b) {
  j = json::object();
  for (auto e : {Emotion::Negative, Emotion::Neutral}) {
    for (auto i : {Instruction::Describe, Instruction::Reappraise}) {
      json arr = json::array();
      for (const auto& p : b.entries[PromptBank::slot(e, i)]) arr.push_back({{"text", p.text}, {"sentiment", p.sentiment}});
      j[std::string(to_string(e)) + (i == Instruction::Describe ? "/Describe" : "/Reappraise")] = arr;
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic stimulus set: text "images" whose words describe the scene, so
// the mock encoder and captioner can work with them.

inline std::vector<std::string> scene_descriptions(Emotion e) {
  if (e == Emotion::Negative) {
    return {"an injured man lying on a road", "a crashed car with broken glass", "a crying child by a broken window",
            "a dirty room full of trash", "a wounded dog on a street", "a house on fire at night",
            "a lonely old woman in a dark room", "a soldier with a gun in a ruined street",
            "a hospital bed with a sick patient", "a flooded village with damaged homes",
            "a hungry child holding an empty bowl", "a victim with blood on the floor"};
  }
  return {"a cup of coffee on a table", "a man walking on a street", "a chair beside a window",
          "a bus parked at a station", "books stacked on a shelf", "a woman reading a newspaper",
          "a bowl of fruit in a kitchen", "an office building with windows", "a bicycle leaning on a wall",
          "a plate and a fork on a counter", "a clock hanging in a hallway", "a basket of laundry"};
}

struct StimulusSet {
  std::vector<Stimulus> manifest;
  storage::MemoryStimulusLoader loader;
};

// `per_valence` stimuli of each class; ids neg_001.., neu_001..; paths
// stimuli/<id>.txt relative to the output root.
inline StimulusSet make_stimulus_set(std::size_t per_valence = 80) {
  StimulusSet s;
  for (auto e : {Emotion::Negative, Emotion::Neutral}) {
    const auto scenes = scene_descriptions(e);
    for (std::size_t i = 0; i < per_valence; ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "%s_%03zu", e == Emotion::Negative ? "neg" : "neu", i + 1);
      Stimulus st;
      st.stimulus_id = id;
      st.valence_class = e;
      st.image_path = std::string("stimuli/") + id + ".txt";
      s.loader.add(st.image_path, scenes[i % scenes.size()] + " (view " + std::to_string(i / scenes.size() + 1) + ")\n");
      s.manifest.push_back(std::move(st));
    }
  }
  return s;
}

// Writes the stimulus files and manifest.json below `root`.
inline void write_stimulus_set(const StimulusSet& s, const std::filesystem::path& root) {
  for (const auto& [path, content] : s.loader.images()) storage::write_file_atomic(root / path, content);
  storage::write_file_atomic(root / "manifest.json", storage::manifest_json({1, s.manifest}).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Backend: mock services with the prompt bank registered as fixtures.

inline std::string audio_fixture_key(const PromptEntry& p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "bank_%016llx", static_cast<unsigned long long>(fnv1a64(p.text)));
  return buf;
}

struct SimBackend {
  mock::MockBackends mocks;
  clients::ServiceSuite services;
  PromptBank bank;
  clients::AttemptLog attempts;

  SimBackend(PromptBank b, const mock::MockSuiteOptions& opts)
      : mocks(mock::make_mock_backends(opts)), services(mock::make_suite(mocks, opts.client_config)), bank(std::move(b)) {
    for (const auto& cell : bank.entries) {
      for (const auto& p : cell) {
        mocks.speech->add_fixture(audio_fixture_key(p), p.text);
        mocks.sentiment->add_fixture(p.text, p.sentiment);
      }
    }
  }
};

// Realistic but deterministic service latencies (all well inside Gray).
inline mock::MockSuiteOptions default_sim_options() {
  mock::MockSuiteOptions o;
  o.speech.latency_ms = 400;
  o.generation.latency_ms = 2500;
  o.caption_primary.latency_ms = 800;
  o.caption_fallback.latency_ms = 300;
  o.embedding.latency_ms = 50;
  o.sentiment.latency_ms = 50;
  return o;
}

// ---------------------------------------------------------------------------
// The simulated participant as a UI channel.

class SimulatedParticipant final : public protocol::UiChannel {
 public:
  SimulatedParticipant(ParticipantModel model, const PromptBank& bank)
      : model_(std::move(model)), bank_(bank) {
    model_.validate();
  }

  bool connected() const override { return true; }
  void announce(const protocol::PhaseAnnouncement& a) override {
    if (a.phase == Phase::View) current_ = a;
  }

  std::vector<std::uint8_t> take_audio(int trial_index) override {
    const auto& options = bank_.for_cell(current_.condition);
    require(!options.empty(), ErrorKind::Validation, "prompt bank is empty for " + current_.condition.label());
    Rng rng(derive_seed(model_.seed, {0x70726f6dULL, static_cast<std::uint64_t>(trial_index)}));
    const auto& p = options[rng.below(options.size())];
    const std::string audio = "fixture:" + audio_fixture_key(p);
    return {audio.begin(), audio.end()};
  }

  std::optional<protocol::RatingResponse> await_rating(const TrialRecord& partial, std::optional<std::int64_t> deadline,
                                                       Clock& clock) override {
    Rng rng(derive_seed(model_.seed, {0x72617465ULL, static_cast<std::uint64_t>(partial.trial_index)}));
    const int raw = rate(partial, rng);
    const std::int64_t delay = 1000 + static_cast<std::int64_t>(rng.below(2000));
    std::int64_t at = clock.now_ms() + delay;
    if (deadline && at > *deadline) {
      clock.sleep_until(*deadline);
      return std::nullopt;
    }
    clock.sleep_until(at);
    return protocol::RatingResponse{raw, at};
  }

  double latent(const TrialRecord& t, Rng& rng) const {
    double y = model_.baseline_by_cell[t.condition.index()];
    if (t.sentiment) y += model_.sentiment_gain(t.condition) * text::sentiment_score(*t.sentiment);
    if (t.condition.is_ai() && t.alignment) y += model_.alignment_gain * *t.alignment;
    return y + model_.noise_sd * rng.normal();
  }

  int rate(const TrialRecord& t, Rng& rng) const { return quantize_rating(latent(t, rng)); }

  const ParticipantModel& model() const { return model_; }

 private:
  ParticipantModel model_;
  const PromptBank& bank_;
  protocol::PhaseAnnouncement current_{};
};

// ---------------------------------------------------------------------------

inline constexpr std::string_view kSimulatedCreatedAt = "1970-01-01T00:00:00Z";

struct SimulationSetup {
  const StimulusSet& stimuli;
  SimBackend& backend;
  storage::ArtifactStore& artifacts;
  protocol::PhaseSchedule schedule{};
  protocol::GenerationDefaults generation{};
};

// One trial through the protocol engine on a fresh virtual clock.
inline TrialRecord simulate_trial(const ParticipantModel& model, const Condition& condition, const Stimulus& stimulus,
                                  SimulationSetup& setup, int trial_index = 0) {
  VirtualClock clock;
  SimulatedParticipant participant(model, setup.backend.bank);
  protocol::EngineContext ctx{setup.backend.services, setup.stimuli.loader, setup.artifacts, clock, participant};
  ctx.session_seed = model.seed;
  ctx.generation = setup.generation;
  return protocol::run_trial(trial_index, {condition, stimulus}, setup.schedule, ctx);
}

struct SubjectSpec {
  std::string subject_id;
  std::string session_id;
  ParticipantModel model;
  std::uint64_t plan_seed = 0;
};

inline SessionRecord simulate_session(const SubjectSpec& spec, int trials_per_cell, SimulationSetup& setup,
                                      const json& stamp, storage::SessionWriter* writer = nullptr) {
  const auto plan = protocol::plan_session(setup.stimuli.manifest, trials_per_cell, spec.plan_seed);
  VirtualClock clock;
  SimulatedParticipant participant(spec.model, setup.backend.bank);
  protocol::EngineContext ctx{setup.backend.services, setup.stimuli.loader, setup.artifacts, clock, participant};
  ctx.session_seed = spec.model.seed;
  ctx.generation = setup.generation;

  SessionRecord header;
  header.session_id = spec.session_id;
  header.subject_id = spec.subject_id;
  header.language = Language::EN;
  header.seed = spec.model.seed;
  header.created_at = std::string(kSimulatedCreatedAt);
  header.stamp = stamp;
  auto out = protocol::run_session(plan, setup.schedule, ctx, header, writer);
  require(out.completed, ErrorKind::Validation, "simulated session paused: " + out.pause_reason);
  return std::move(out.record);
}

// Per-subject models drawn around the template.
inline std::vector<SubjectSpec> cohort_subjects(int n_subjects, const ModelTemplate& tmpl, std::uint64_t seed) {
  require(n_subjects >= 2, ErrorKind::Validation, "a cohort needs at least 2 subjects");
  std::vector<SubjectSpec> out;
  for (int s = 0; s < n_subjects; ++s) {
    const std::uint64_t subject_seed = derive_seed(seed, {0x7375626aULL, static_cast<std::uint64_t>(s)});
    Rng rng(derive_seed(subject_seed, {0x6a6974ULL}));
    SubjectSpec spec;
    char id[16];
    std::snprintf(id, sizeof id, "s%02d", s + 1);
    spec.subject_id = id;
    char sid[48];
    std::snprintf(sid, sizeof sid, "sim-%016llx-%s", static_cast<unsigned long long>(seed), id);
    spec.session_id = sid;
    spec.model = tmpl.model;
    spec.model.seed = subject_seed;
    const double intercept = tmpl.jitter.intercept_sd * rng.normal();
    for (auto& b : spec.model.baseline_by_cell) {
      b = std::clamp(b + intercept + tmpl.jitter.cell_sd * rng.normal(), -2.0, 2.0);
    }
    spec.model.sentiment_gain_ai *= 1.0 + tmpl.jitter.gain_rel_sd * rng.normal();
    spec.model.sentiment_gain_noai *= 1.0 + tmpl.jitter.gain_rel_sd * rng.normal();
    spec.model.alignment_gain *= 1.0 + tmpl.jitter.gain_rel_sd * rng.normal();
    spec.plan_seed = derive_seed(subject_seed, {0x706c616eULL});
    out.push_back(std::move(spec));
  }
  return out;
}

struct CohortOptions {
  protocol::PhaseSchedule schedule{};
  protocol::GenerationDefaults generation{};
  mock::MockSuiteOptions services = default_sim_options();
  PromptBank bank = default_prompt_bank();
  std::size_t stimuli_per_valence = 80;
  unsigned threads = 0;  // 0: hardware concurrency
};

inline json cohort_config_json(int n_subjects, int trials_per_cell, const ModelTemplate& tmpl, const CohortOptions& o) {
  return json{{"mode", "simulate"},
              {"subjects", n_subjects},
              {"trials_per_cell", trials_per_cell},
              {"model", tmpl},
              {"schedule", o.schedule},
              {"image_scale", o.generation.image_scale},
              {"text_guidance", o.generation.text_guidance},
              {"denoise_steps", o.generation.denoise_steps},
              {"embedding_dim", o.services.embedding_dim},
              {"generation_noise", o.services.generation_noise},
              {"stimuli_per_valence", o.stimuli_per_valence},
              {"prompt_bank", o.bank}};
}

struct Cohort {
  std::vector<SessionRecord> sessions;
  StimulusSet stimuli;
  json stamp;
};

// Subjects run independently (in parallel when threads allow); results are
// ordered by subject, so output does not depend on scheduling. When
// `sessions_dir` is set every session is also streamed to
// <sessions_dir>/<session_id>.jsonl.
inline Cohort simulate_cohort(int n_subjects, int trials_per_cell, const ModelTemplate& tmpl, std::uint64_t seed,
                              const CohortOptions& opts, storage::ArtifactStore& artifacts,
                              const std::optional<std::filesystem::path>& sessions_dir = std::nullopt) {
  const auto subjects = cohort_subjects(n_subjects, tmpl, seed);
  Cohort cohort;
  cohort.stimuli = make_stimulus_set(opts.stimuli_per_valence);
  cohort.stamp = make_stamp(cohort_config_json(n_subjects, trials_per_cell, tmpl, opts), seed);
  SimBackend backend(opts.bank, opts.services);
  SimulationSetup setup{cohort.stimuli, backend, artifacts, opts.schedule, opts.generation};

  auto run_one = [&](std::size_t i) {
    std::optional<storage::SessionWriter> writer;
    if (sessions_dir) {
      SessionRecord header;
      header.session_id = subjects[i].session_id;
      header.subject_id = subjects[i].subject_id;
      header.seed = subjects[i].model.seed;
      header.created_at = std::string(kSimulatedCreatedAt);
      header.stamp = cohort.stamp;
      writer.emplace(storage::SessionWriter::create(*sessions_dir / (subjects[i].session_id + ".jsonl"), header));
    }
    return simulate_session(subjects[i], trials_per_cell, setup, cohort.stamp, writer ? &*writer : nullptr);
  };

  unsigned threads = opts.threads ? opts.threads : std::max(1u, std::thread::hardware_concurrency());
  cohort.sessions.resize(subjects.size());
  if (threads <= 1) {
    for (std::size_t i = 0; i < subjects.size(); ++i) cohort.sessions[i] = run_one(i);
  } else {
    for (std::size_t start = 0; start < subjects.size(); start += threads) {
      std::vector<std::future<SessionRecord>> batch;
      for (std::size_t i = start; i < std::min(subjects.size(), start + threads); ++i) {
        batch.push_back(std::async(std::launch::async, run_one, i));
      }
      for (std::size_t k = 0; k < batch.size(); ++k) cohort.sessions[start + k] = batch[k].get();
    }
  }
  return cohort;
}

}  // namespace rlab::sim
