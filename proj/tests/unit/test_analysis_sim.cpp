#include <gtest/gtest.h>

#include "helpers.hpp"
#include "rlab/analysis.hpp"
#include "rlab/replay.hpp"
#include "rlab/simulator.hpp"

using namespace rlab;
using rlab::testing::TempDir;

namespace {

sim::CohortOptions small_options() {
  sim::CohortOptions o;
  o.stimuli_per_valence = 12;
  o.threads = 1;
  return o;
}

sim::Cohort small_cohort(std::uint64_t seed, storage::ArtifactStore& store, int subjects = 6, int k = 2,
                         const sim::ModelTemplate& tmpl = sim::effect_template()) {
  return sim::simulate_cohort(subjects, k, tmpl, seed, small_options(), store);
}

}  // namespace

// ---------------------------------------------------------------------------
// Simulator

TEST(Quantize, HalfAwayFromZeroOnTheSliderGrid) {
  EXPECT_EQ(sim::quantize_rating(0.0), 5);
  EXPECT_EQ(sim::quantize_rating(2.0), 9);
  EXPECT_EQ(sim::quantize_rating(-2.0), 1);
  EXPECT_EQ(sim::quantize_rating(0.25), 6);
  EXPECT_EQ(sim::quantize_rating(-0.25), 5);
  EXPECT_EQ(sim::quantize_rating(-0.26), 4);
  EXPECT_EQ(sim::quantize_rating(7.0), 9);
  EXPECT_EQ(sim::quantize_rating(-7.0), 1);
  for (int raw = 1; raw <= 9; ++raw) EXPECT_EQ(sim::quantize_rating(remap_rating(raw)), raw);
}

TEST(Simulator, NoiselessGainlessParticipantRatesItsBaseline) {
  sim::ModelTemplate t;
  for (std::size_t c = 0; c < kCellCount; ++c) t.model.baseline_by_cell[c] = -1.0 + 0.25 * static_cast<double>(c);
  t.model.noise_sd = 0.0;
  t.jitter = {0.0, 0.0, 0.0};
  storage::MemoryArtifactStore store;
  const auto cohort = small_cohort(3, store, 2, 1, t);
  for (const auto& s : cohort.sessions) {
    for (const auto& tr : s.trials) {
      EXPECT_EQ(tr.rating->raw(), sim::quantize_rating(t.model.baseline_by_cell[tr.condition.index()]));
    }
  }
}

TEST(Simulator, SessionsValidateAndAreThreadIndependent) {
  storage::MemoryArtifactStore a, b;
  auto opts = small_options();
  const auto one = sim::simulate_cohort(4, 2, sim::effect_template(), 9, opts, a);
  opts.threads = 3;
  const auto three = sim::simulate_cohort(4, 2, sim::effect_template(), 9, opts, b);
  ASSERT_EQ(one.sessions.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_TRUE(validate_session(one.sessions[i]).empty());
    EXPECT_EQ(one.sessions[i].trials.size(), 16u);
    EXPECT_EQ(encode_session(one.sessions[i]), encode_session(three.sessions[i]));
  }
  EXPECT_EQ(a.snapshot(), b.snapshot());
}

TEST(Simulator, DifferentSeedsDiffer) {
  storage::MemoryArtifactStore a, b;
  const auto x = small_cohort(1, a, 2, 1);
  const auto y = small_cohort(2, b, 2, 1);
  EXPECT_NE(encode_session(x.sessions[0]), encode_session(y.sessions[0]));
}

TEST(Simulator, TemplateJsonRoundTrip) {
  const auto t = sim::effect_template();
  const auto back = json(t).get<sim::ModelTemplate>();
  EXPECT_EQ(json(back), json(t));
  auto bad = json(t);
  bad["baseline_by_cell"]["Neg-D"] = 2.5;
  EXPECT_THROW(bad.get<sim::ModelTemplate>(), Error);
}

TEST(Simulator, ReappraiseAiAlignmentFallsAsImageScaleRises) {
  // Raising the reference-image weight pulls the generated image (and so its
  // caption) toward the scene and away from the spoken prompt.
  const auto stim = sim::make_stimulus_set(40);
  sim::SimBackend backend(sim::default_prompt_bank(), sim::default_sim_options());
  storage::MemoryArtifactStore store;
  auto model = sim::effect_template().model;
  model.noise_sd = 0.0;
  std::vector<double> mean_alignment, mean_rating;
  for (double lambda : {0.3, 0.4, 0.5, 0.6, 0.7}) {
    sim::SimulationSetup setup{stim, backend, store};
    setup.generation.image_scale = lambda;
    double a = 0.0, r = 0.0;
    int n = 0;
    for (const auto& s : stim.manifest) {
      if (s.valence_class != Emotion::Negative) continue;
      model.seed = 1000 + static_cast<std::uint64_t>(n);
      const auto t = sim::simulate_trial(model, Condition::parse("Neg-RAI"), s, setup, n);
      ASSERT_TRUE(t.alignment.has_value());
      a += *t.alignment;
      r += t.rating->remapped();
      ++n;
    }
    mean_alignment.push_back(a / n);
    mean_rating.push_back(r / n);
  }
  for (std::size_t i = 1; i < mean_alignment.size(); ++i) {
    EXPECT_LE(mean_alignment[i], mean_alignment[i - 1]) << i;
    EXPECT_LE(mean_rating[i], mean_rating[i - 1] + 1e-12) << i;
  }
  EXPECT_LT(mean_alignment.back(), mean_alignment.front());
}

// ---------------------------------------------------------------------------
// Analysis

TEST(Analysis, SmallCohortReportShape) {
  storage::MemoryArtifactStore store;
  const auto cohort = small_cohort(21, store);
  const auto rep = analysis::analyze_sessions(cohort.sessions);
  EXPECT_EQ(rep.n_subjects, 6u);
  EXPECT_EQ(rep.anova.size(), 7u);
  EXPECT_EQ(rep.posthoc.size(), 8u);
  EXPECT_EQ(rep.sentiment_correlations.size(), 8u);
  EXPECT_EQ(rep.alignment_correlations.size(), 4u);
  EXPECT_EQ(rep.regressions.size(), 8u);
  for (const auto& c : rep.cells) EXPECT_EQ(c.n, 6u);
  for (const auto& p : rep.posthoc) {
    EXPECT_EQ(p.family_size, 4);
    EXPECT_NEAR(p.p_adjusted, std::min(1.0, 4 * p.p_raw), 1e-15);
  }
  // Main-effect contrast is mean(first level) - mean(second level).
  double neg = 0, neu = 0;
  for (const auto& c : rep.cells) (c.cell.starts_with("Neg") ? neg : neu) += c.mean / 4.0;
  EXPECT_NEAR(rep.effect("emotion").contrast_estimate, neg - neu, 1e-12);
  const auto j = analysis::to_json(rep);
  EXPECT_EQ(j["anova"].size(), 7u);
  EXPECT_FALSE(analysis::to_markdown(rep).empty());
}

TEST(Analysis, ReportJsonIsDeterministic) {
  storage::MemoryArtifactStore a, b;
  const auto x = analysis::report_json_text(analysis::analyze_sessions(small_cohort(5, a).sessions));
  const auto y = analysis::report_json_text(analysis::analyze_sessions(small_cohort(5, b).sessions));
  EXPECT_EQ(x, y);
}

TEST(Analysis, TwoIdenticalSubjectsHaveZeroSem) {
  storage::MemoryArtifactStore store;
  const auto cohort = small_cohort(8, store, 2, 1);
  auto twin = cohort.sessions[0];
  twin.subject_id = "twin";
  twin.session_id = "twin-session";
  const auto rep = analysis::analyze_sessions({cohort.sessions[0], twin});
  for (const auto& c : rep.cells) {
    EXPECT_EQ(c.sem, 0.0);
    EXPECT_EQ(c.sd, 0.0);
  }
  for (const auto& p : rep.posthoc) EXPECT_TRUE(p.error.has_value());
}

TEST(Analysis, NoAiOnlySessionsNameMissingCells) {
  storage::MemoryArtifactStore store;
  auto cohort = small_cohort(8, store, 3, 1);
  for (auto& s : cohort.sessions) {
    std::erase_if(s.trials, [](const TrialRecord& t) { return t.condition.is_ai(); });
  }
  try {
    analysis::analyze_sessions(cohort.sessions);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Analysis);
    EXPECT_NE(std::string(e.what()).find("Neg-DAI"), std::string::npos);
  }
}

TEST(Analysis, IncompleteSubjectIsExcludedWithReason) {
  storage::MemoryArtifactStore store;
  auto cohort = small_cohort(8, store, 3, 1);
  std::erase_if(cohort.sessions[1].trials, [](const TrialRecord& t) { return t.condition.label() == "Neu-R"; });
  const auto rep = analysis::analyze_sessions(cohort.sessions);
  EXPECT_EQ(rep.n_subjects, 2u);
  EXPECT_EQ(rep.subjects_excluded.at(cohort.sessions[1].subject_id), "missing cells Neu-R");
}

TEST(Analysis, FailedGenerationsAndTimeoutsAreExcludedAndCounted) {
  storage::MemoryArtifactStore store;
  auto cohort = small_cohort(8, store, 3, 2);
  auto& trials = cohort.sessions[0].trials;
  auto ai = std::find_if(trials.begin(), trials.end(), [](const TrialRecord& t) { return t.condition.is_ai(); });
  ai->flags.insert(TrialFlag::GenerationFailed);
  auto noai = std::find_if(trials.begin(), trials.end(), [](const TrialRecord& t) { return !t.condition.is_ai(); });
  noai->rating.reset();
  noai->flags.insert(TrialFlag::RatingTimeout);
  const auto rep = analysis::analyze_sessions(cohort.sessions);
  EXPECT_EQ(rep.excluded_trials.at("generation_failed"), 1);
  EXPECT_EQ(rep.excluded_trials.at("rating_timeout"), 1);
  EXPECT_EQ(rep.n_subjects, 3u);
}

TEST(Analysis, FamilySizeIsConfigurable) {
  storage::MemoryArtifactStore store;
  const auto cohort = small_cohort(21, store);
  analysis::AnalysisConfig cfg;
  cfg.posthoc_family_size = 8;
  const auto rep = analysis::analyze_sessions(cohort.sessions, cfg);
  for (const auto& p : rep.posthoc) EXPECT_NEAR(p.p_adjusted, std::min(1.0, 8 * p.p_raw), 1e-15);
  cfg.posthoc_family_size = 0;
  EXPECT_THROW(analysis::analyze_sessions(cohort.sessions, cfg), Error);
}

TEST(Analysis, PlotDataFiles) {
  TempDir dir;
  storage::MemoryArtifactStore store;
  const auto cohort = small_cohort(21, store, 3, 1);
  analysis::write_plot_data(cohort.sessions, {}, dir.path());
  for (const char* f : {"plot_mean_ratings.csv", "plot_sentiment.csv", "plot_alignment.csv"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  }
}

// ---------------------------------------------------------------------------
// Replay

namespace {

struct ReplayFixture {
  TempDir dir;
  storage::FileArtifactStore store{dir / "artifacts"};
  sim::Cohort cohort;
  sim::SimBackend backend{sim::default_prompt_bank(), sim::default_sim_options()};

  ReplayFixture() : cohort(sim::simulate_cohort(2, 1, sim::effect_template(), 17, small_options(), store)) {}
};

}  // namespace

TEST(Replay, CleanSessionHasNoMismatches) {
  ReplayFixture f;
  const auto rep = replay::replay_session(encode_session(f.cohort.sessions[0]), f.backend.services, f.store,
                                          {.tolerance = 1e-9, .recaption = true});
  EXPECT_TRUE(rep.clean()) << replay::to_json(rep).dump(2);
  EXPECT_EQ(rep.trials, 8u);
}

TEST(Replay, EditedRatingIsReported) {
  ReplayFixture f;
  const auto text = encode_session(f.cohort.sessions[0]);
  std::istringstream in(text);
  std::string line, edited;
  int n = 0;
  while (std::getline(in, line)) {
    if (n++ == 1) {
      auto j = json::parse(line);
      const int raw = j["rating"]["raw"];
      j["rating"]["raw"] = raw == 9 ? 8 : raw + 1;
      line = j.dump();
    }
    edited += line + "\n";
  }
  const auto rep = replay::replay_session(edited, f.backend.services, f.store);
  ASSERT_EQ(rep.mismatches.size(), 1u);
  EXPECT_EQ(rep.mismatches[0].field, "rating.remapped");
  EXPECT_EQ(rep.mismatches[0].trial_index, 0);
}

TEST(Replay, DeletedArtifactGivesPartialReplayWithWarning) {
  ReplayFixture f;
  const auto& s = f.cohort.sessions[0];
  auto t = std::find_if(s.trials.begin(), s.trials.end(), [](const TrialRecord& r) { return r.generation.has_value(); });
  ASSERT_NE(t, s.trials.end());
  std::filesystem::remove(f.dir / t->generation->image_ref.path);
  const auto rep = replay::replay_session(encode_session(s), f.backend.services, f.store);
  EXPECT_TRUE(rep.mismatches.empty());
  EXPECT_TRUE(rep.partial());
  ASSERT_EQ(rep.missing_artifacts.size(), 1u);
  EXPECT_EQ(rep.missing_artifacts[0], t->generation->image_ref.artifact_id);
  EXPECT_FALSE(rep.warnings.empty());
}

TEST(Replay, TamperedArtifactAndAlignmentAreReported) {
  ReplayFixture f;
  auto s = f.cohort.sessions[0];
  auto t = std::find_if(s.trials.begin(), s.trials.end(), [](const TrialRecord& r) { return r.alignment.has_value(); });
  ASSERT_NE(t, s.trials.end());
  *t->alignment += 0.01;
  storage::write_file_atomic(f.dir / t->generation->image_ref.path, "tampered");
  const auto rep = replay::replay_session(encode_session(s), f.backend.services, f.store);
  std::set<std::string> fields;
  for (const auto& m : rep.mismatches) fields.insert(m.field);
  EXPECT_TRUE(fields.contains("alignment"));
  EXPECT_TRUE(fields.contains("generation.image_ref"));
}
