#pragma once

// Session-level statistics: per-subject cell means, the 2x2x2
// repeated-measures ANOVA, Bonferroni-corrected post-hoc paired tests,
// sentiment/alignment correlations and covariate-controlled regressions.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rlab/domain.hpp"
#include "rlab/error.hpp"
#include "rlab/stats.hpp"
#include "rlab/storage.hpp"
#include "rlab/text_metrics.hpp"

namespace rlab::analysis {

struct AnalysisConfig {
  // Bonferroni family sizes.
  int posthoc_family_size = 4;  // pairwise tests per valence panel
  int sentiment_family_reappraise = 4;
  int sentiment_family_describe = 1;
  int alignment_family_reappraise = 2;
  int alignment_family_describe = 1;
  double alpha = 0.05;
  bool exclude_generation_failed = true;  // from AI-cell analyses

  void validate() const {
    for (int m : {posthoc_family_size, sentiment_family_reappraise, sentiment_family_describe,
                  alignment_family_reappraise, alignment_family_describe}) {
      require(m >= 1, ErrorKind::Validation, "family sizes must be >= 1");
    }
    require(alpha > 0.0 && alpha < 1.0, ErrorKind::Validation, "alpha must lie in (0,1)");
  }
};

inline void from_json(const json& j, AnalysisConfig& c) {
  c.posthoc_family_size = j.value("posthoc_family_size", c.posthoc_family_size);
  c.sentiment_family_reappraise = j.value("sentiment_family_reappraise", c.sentiment_family_reappraise);
  c.sentiment_family_describe = j.value("sentiment_family_describe", c.sentiment_family_describe);
  c.alignment_family_reappraise = j.value("alignment_family_reappraise", c.alignment_family_reappraise);
  c.alignment_family_describe = j.value("alignment_family_describe", c.alignment_family_describe);
  c.alpha = j.value("alpha", c.alpha);
  c.exclude_generation_failed = j.value("exclude_generation_failed", c.exclude_generation_failed);
}

inline json config_json(const AnalysisConfig& c) {
  return json{{"posthoc_family_size", c.posthoc_family_size},
              {"sentiment_family_reappraise", c.sentiment_family_reappraise},
              {"sentiment_family_describe", c.sentiment_family_describe},
              {"alignment_family_reappraise", c.alignment_family_reappraise},
              {"alignment_family_describe", c.alignment_family_describe},
              {"alpha", c.alpha},
              {"exclude_generation_failed", c.exclude_generation_failed}};
}

struct CellSummary {
  std::string cell;
  std::size_t n = 0;
  double mean = 0.0;
  double sd = 0.0;
  double sem = 0.0;
};

struct PairwiseTest {
  std::string a;  // mean(a) - mean(b)
  std::string b;
  std::size_t n = 0;
  double mean_difference = 0.0;
  double t = 0.0;
  int df = 0;
  double p_raw = 1.0;
  double p_adjusted = 1.0;
  int family_size = 1;
  std::optional<std::string> error;
};

struct CorrelationReport {
  std::string cell;
  std::string measure;  // "sentiment" or "alignment"
  std::size_t n = 0;
  double rho = 0.0;
  double p_raw = 1.0;
  double p_adjusted = 1.0;
  int family_size = 1;
  std::optional<std::string> error;
};

struct RegressionReport {
  std::string cell;
  std::size_t n = 0;
  std::optional<stats::CovariateRegression> result;
  std::optional<std::string> error;
};

struct EffectReport {
  stats::AnovaEffect effect;
  // Mean over subjects of the +/-1 contrast divided by 4; for a main effect
  // this is mean(first level) - mean(second level), with first levels
  // Negative, Describe and NoAI.
  double contrast_estimate = 0.0;
};

struct AnalysisReport {
  std::vector<std::string> subjects_included;
  std::map<std::string, std::string> subjects_excluded;  // id -> reason
  std::map<std::string, int> excluded_trials;            // reason -> count
  std::array<CellSummary, kCellCount> cells{};
  std::size_t n_subjects = 0;
  std::vector<EffectReport> anova;
  std::vector<PairwiseTest> posthoc;
  std::vector<CorrelationReport> sentiment_correlations;
  std::vector<CorrelationReport> alignment_correlations;
  std::vector<RegressionReport> regressions;
  json config = json::object();
  json stamp = json::object();

  const EffectReport& effect(std::string_view name) const {
    for (const auto& e : anova) {
      if (e.effect.name == name) return e;
    }
    fail(ErrorKind::Validation, "no ANOVA effect named '" + std::string(name) + "'");
  }
};

// Per-subject, per-cell aggregates of included trials.
struct SubjectData {
  std::string subject_id;
  std::array<std::vector<double>, kCellCount> ratings;
  // Trials carrying both a rating and the measure.
  std::array<std::vector<std::pair<double, double>>, kCellCount> sentiment_rating;
  std::array<std::vector<std::pair<double, double>>, kCellCount> alignment_rating;
  std::array<std::vector<double>, kCellCount> word_count;    // trials in sentiment_rating
  std::array<std::vector<double>, kCellCount> reading_ease;  // NaN when the transcript has none
};

namespace detail {

inline double mean_of(const std::vector<double>& v) { return stats::mean(v); }

inline std::string join(const std::vector<std::string>& items, std::string_view sep) {
  std::string out;
  for (const auto& s : items) out += (out.empty() ? "" : std::string(sep)) + s;
  return out;
}

}  // namespace detail

inline std::vector<SubjectData> collect(const std::vector<SessionRecord>& sessions, const AnalysisConfig& cfg,
                                        std::map<std::string, int>& excluded) {
  std::map<std::string, SubjectData> by_subject;
  for (const auto& s : sessions) {
    auto& d = by_subject[s.subject_id];
    d.subject_id = s.subject_id;
    for (const auto& t : s.trials) {
      const auto c = t.condition.index();
      if (!t.rating) {
        ++excluded["rating_timeout"];
        continue;
      }
      if (cfg.exclude_generation_failed && t.condition.is_ai() && t.has(TrialFlag::GenerationFailed)) {
        ++excluded["generation_failed"];
        continue;
      }
      const double y = t.rating->remapped();
      d.ratings[c].push_back(y);
      if (t.sentiment) {
        d.sentiment_rating[c].push_back({text::sentiment_score(*t.sentiment), y});
        d.word_count[c].push_back(t.transcript ? t.transcript->word_count : 0);
        d.reading_ease[c].push_back(t.transcript && t.transcript->reading_ease ? *t.transcript->reading_ease
                                                                               : std::nan(""));
      } else {
        ++excluded["no_sentiment"];
      }
      if (t.condition.is_ai()) {
        if (t.alignment) d.alignment_rating[c].push_back({*t.alignment, y});
        else if (t.has(TrialFlag::CaptionUnavailable)) ++excluded["caption_unavailable"];
        else ++excluded["no_alignment"];
      }
    }
  }
  std::vector<SubjectData> out;
  for (auto& [id, d] : by_subject) out.push_back(std::move(d));
  return out;
}

inline std::vector<PairwiseTest> posthoc_tests(const std::vector<stats::SubjectCells>& cells, const AnalysisConfig& cfg) {
  std::vector<PairwiseTest> out;
  for (auto e : {Emotion::Negative, Emotion::Neutral}) {
    auto idx = [&](Instruction i, Modality m) { return Condition{e, i, m}.index(); };
    const std::array<std::pair<std::size_t, std::size_t>, 4> pairs{{
        {idx(Instruction::Reappraise, Modality::AI), idx(Instruction::Reappraise, Modality::NoAI)},
        {idx(Instruction::Reappraise, Modality::NoAI), idx(Instruction::Describe, Modality::NoAI)},
        {idx(Instruction::Reappraise, Modality::AI), idx(Instruction::Describe, Modality::AI)},
        {idx(Instruction::Describe, Modality::AI), idx(Instruction::Describe, Modality::NoAI)},
    }};
    std::vector<PairwiseTest> family;
    std::vector<double> p_raw;
    for (auto [a, b] : pairs) {
      PairwiseTest pt;
      pt.a = Condition::from_index(a).label();
      pt.b = Condition::from_index(b).label();
      pt.family_size = cfg.posthoc_family_size;
      std::vector<double> x, y;
      for (const auto& s : cells) {
        x.push_back(*s.cells[a]);
        y.push_back(*s.cells[b]);
      }
      pt.n = x.size();
      try {
        const auto r = stats::paired_t(x, y);
        pt.mean_difference = r.mean_difference;
        pt.t = r.t;
        pt.df = r.df;
        pt.p_raw = r.p_two_tailed;
      } catch (const Error& err) {
        pt.error = err.what();
        pt.mean_difference = stats::mean(x) - stats::mean(y);
        pt.df = static_cast<int>(x.size()) - 1;
      }
      p_raw.push_back(pt.p_raw);
      family.push_back(pt);
    }
    const auto adj = stats::bonferroni(p_raw, std::max<int>(cfg.posthoc_family_size, static_cast<int>(p_raw.size())));
    for (std::size_t i = 0; i < family.size(); ++i) {
      family[i].p_adjusted = family[i].error ? 1.0 : adj[i];
      out.push_back(family[i]);
    }
  }
  return out;
}

inline CorrelationReport correlate_cell(const std::vector<SubjectData>& data, std::size_t cell, bool alignment, int m) {
  CorrelationReport r;
  r.cell = Condition::from_index(cell).label();
  r.measure = alignment ? "alignment" : "sentiment";
  r.family_size = m;
  std::vector<double> x, y;
  for (const auto& d : data) {
    const auto& pairs = alignment ? d.alignment_rating[cell] : d.sentiment_rating[cell];
    if (pairs.empty()) continue;
    double sx = 0.0, sy = 0.0;
    for (auto [a, b] : pairs) {
      sx += a;
      sy += b;
    }
    x.push_back(sx / pairs.size());
    y.push_back(sy / pairs.size());
  }
  r.n = x.size();
  try {
    const auto c = stats::pearson(x, y);
    r.rho = c.rho;
    r.p_raw = c.p_two_tailed;
    r.p_adjusted = std::min(1.0, m * c.p_two_tailed);
  } catch (const Error& e) {
    r.error = e.what();
  }
  return r;
}

inline RegressionReport regress_cell(const std::vector<SubjectData>& data, std::size_t cell) {
  RegressionReport r;
  r.cell = Condition::from_index(cell).label();
  std::vector<double> y, s, wc, re;
  for (const auto& d : data) {
    const auto& pairs = d.sentiment_rating[cell];
    double ss = 0.0, sy = 0.0, sw = 0.0, sre = 0.0;
    std::size_t nre = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      ss += pairs[i].first;
      sy += pairs[i].second;
      sw += d.word_count[cell][i];
      if (!std::isnan(d.reading_ease[cell][i])) {
        sre += d.reading_ease[cell][i];
        ++nre;
      }
    }
    if (pairs.empty() || nre == 0) continue;
    const double n = static_cast<double>(pairs.size());
    y.push_back(sy / n);
    s.push_back(ss / n);
    wc.push_back(sw / n);
    re.push_back(sre / nre);
  }
  r.n = y.size();
  try {
    r.result = stats::regression_with_covariates(y, s, wc, re);
  } catch (const Error& e) {
    r.error = e.what();
  }
  return r;
}

inline AnalysisReport analyze_sessions(const std::vector<SessionRecord>& sessions, const AnalysisConfig& cfg = {}) {
  cfg.validate();
  AnalysisReport rep;
  rep.config = config_json(cfg);
  const auto data = collect(sessions, cfg, rep.excluded_trials);

  std::vector<stats::SubjectCells> complete;
  std::vector<std::string> missing_desc;
  for (const auto& d : data) {
    std::vector<std::string> missing;
    stats::SubjectCells sc;
    sc.subject_id = d.subject_id;
    for (std::size_t c = 0; c < kCellCount; ++c) {
      if (d.ratings[c].empty()) missing.push_back(Condition::from_index(c).label());
      else sc.cells[c] = detail::mean_of(d.ratings[c]);
    }
    if (missing.empty()) {
      complete.push_back(sc);
      rep.subjects_included.push_back(d.subject_id);
    } else {
      const auto reason = "missing cells " + detail::join(missing, ", ");
      rep.subjects_excluded[d.subject_id] = reason;
      missing_desc.push_back(d.subject_id + ": " + detail::join(missing, ", "));
    }
  }
  if (complete.size() < 2) {
    std::string msg = "ANOVA needs at least 2 subjects with all 8 cells; have " + std::to_string(complete.size());
    if (!missing_desc.empty()) msg += " (" + detail::join(missing_desc, "; ") + ")";
    fail(ErrorKind::Analysis, msg);
  }
  rep.n_subjects = complete.size();

  for (std::size_t c = 0; c < kCellCount; ++c) {
    std::vector<double> v;
    for (const auto& s : complete) v.push_back(*s.cells[c]);
    auto& cs = rep.cells[c];
    cs.cell = Condition::from_index(c).label();
    cs.n = v.size();
    cs.mean = stats::mean(v);
    cs.sd = stats::sample_sd(v);
    cs.sem = stats::sem(v);
  }

  const auto table = stats::rm_anova_2x2x2(complete);
  for (std::size_t e = 0; e < table.effects.size(); ++e) {
    EffectReport er;
    er.effect = table.effects[e];
    double sum = 0.0;
    for (const auto& s : complete) {
      double contrast = 0.0;
      for (std::size_t c = 0; c < kCellCount; ++c) contrast += stats::contrast_weight(stats::kAnovaEffects[e].factors, c) * *s.cells[c];
      sum += contrast / 4.0;
    }
    er.contrast_estimate = sum / complete.size();
    rep.anova.push_back(er);
  }

  rep.posthoc = posthoc_tests(complete, cfg);

  for (std::size_t c = 0; c < kCellCount; ++c) {
    const auto cond = Condition::from_index(c);
    const bool reappraise = cond.instruction == Instruction::Reappraise;
    rep.sentiment_correlations.push_back(correlate_cell(
        data, c, false, reappraise ? cfg.sentiment_family_reappraise : cfg.sentiment_family_describe));
    if (cond.is_ai()) {
      rep.alignment_correlations.push_back(correlate_cell(
          data, c, true, reappraise ? cfg.alignment_family_reappraise : cfg.alignment_family_describe));
    }
    rep.regressions.push_back(regress_cell(data, c));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Output

inline json to_json(const AnalysisReport& r) {
  json j;
  j["subjects_included"] = r.subjects_included;
  j["subjects_excluded"] = r.subjects_excluded;
  j["excluded_trials"] = r.excluded_trials;
  j["n_subjects"] = r.n_subjects;
  j["config"] = r.config;
  j["stamp"] = r.stamp;
  j["sphericity"] = "not applicable: every within-subject factor has two levels, so df_num = 1 and F is exact";

  json cells = json::array();
  for (const auto& c : r.cells) cells.push_back({{"cell", c.cell}, {"n", c.n}, {"mean", c.mean}, {"sd", c.sd}, {"sem", c.sem}});
  j["cells"] = cells;

  json anova = json::array();
  for (const auto& e : r.anova) {
    anova.push_back({{"effect", e.effect.name},
                     {"F", e.effect.F},
                     {"df_num", e.effect.df_num},
                     {"df_den", e.effect.df_den},
                     {"p", e.effect.p},
                     {"ss_effect", e.effect.ss_effect},
                     {"ss_error", e.effect.ss_error},
                     {"contrast_estimate", e.contrast_estimate}});
  }
  j["anova"] = anova;

  json ph = json::array();
  for (const auto& p : r.posthoc) {
    json row{{"a", p.a},           {"b", p.b},         {"n", p.n},
             {"mean_difference", p.mean_difference}, {"t", p.t}, {"df", p.df},
             {"p_raw", p.p_raw},   {"p_adjusted", p.p_adjusted}, {"family_size", p.family_size}};
    if (p.error) row["error"] = *p.error;
    ph.push_back(row);
  }
  j["posthoc"] = ph;

  auto corr = [](const std::vector<CorrelationReport>& v) {
    json a = json::array();
    for (const auto& c : v) {
      json row{{"cell", c.cell}, {"measure", c.measure}, {"n", c.n}, {"family_size", c.family_size}};
      if (c.error) {
        row["error"] = *c.error;
      } else {
        row["rho"] = c.rho;
        row["p_raw"] = c.p_raw;
        row["p_adjusted"] = c.p_adjusted;
      }
      a.push_back(row);
    }
    return a;
  };
  j["sentiment_correlations"] = corr(r.sentiment_correlations);
  j["alignment_correlations"] = corr(r.alignment_correlations);

  json regs = json::array();
  for (const auto& g : r.regressions) {
    json row{{"cell", g.cell}, {"n", g.n}};
    if (g.error) {
      row["error"] = *g.error;
    } else {
      json coefs = json::array();
      for (const auto& c : g.result->fit.coefficients) {
        coefs.push_back({{"name", c.name}, {"estimate", c.estimate}, {"std_error", c.std_error}, {"t", c.t}, {"p", c.p}});
      }
      row["coefficients"] = coefs;
      row["dropped_covariates"] = g.result->dropped_covariates;
      row["df_residual"] = g.result->fit.df_residual;
      row["r_squared"] = g.result->fit.r_squared;
    }
    regs.push_back(row);
  }
  j["regressions"] = regs;
  return j;
}

// Canonical machine output; byte-identical for identical input.
inline std::string report_json_text(const AnalysisReport& r) { return to_json(r).dump(2) + "\n"; }

namespace detail {

inline std::string fixed(double v, int digits = 3) {
  if (!std::isfinite(v)) return v > 0 ? "inf" : (v < 0 ? "-inf" : "nan");
  std::ostringstream ss;
  ss.setf(std::ios::fixed);
  ss.precision(digits);
  ss << v;
  return ss.str();
}

inline std::string pval(double p) { return p < 0.001 ? "< .001" : fixed(p, 4); }

}  // namespace detail

inline std::string to_markdown(const AnalysisReport& r) {
  using detail::fixed;
  using detail::pval;
  std::ostringstream md;
  md << "# Analysis report\n\n";
  md << "Subjects analysed: " << r.n_subjects << "\n\n";
  if (!r.subjects_excluded.empty()) {
    md << "Excluded subjects:\n\n";
    for (const auto& [id, why] : r.subjects_excluded) md << "- " << id << ": " << why << "\n";
    md << "\n";
  }
  if (!r.excluded_trials.empty()) {
    md << "Trials excluded (by analysis-specific reason):\n\n";
    for (const auto& [why, n] : r.excluded_trials) md << "- " << why << ": " << n << "\n";
    md << "\n";
  }

  md << "## Repeated-measures ANOVA on remapped ratings\n\n";
  md << "| Effect | F | df | p | contrast |\n|---|---|---|---|---|\n";
  for (const auto& e : r.anova) {
    md << "| " << e.effect.name << " | " << fixed(e.effect.F) << " | (" << e.effect.df_num << ", " << e.effect.df_den
       << ") | " << pval(e.effect.p) << " | " << fixed(e.contrast_estimate) << " |\n";
  }
  md << "\nAll within-subject factors have two levels, so no sphericity correction applies.\n\n";

  md << "## Cell means (subject means, remapped -2..+2)\n\n";
  md << "| Cell | n | Mean | SD | SEM |\n|---|---|---|---|---|\n";
  for (const auto& c : r.cells) {
    md << "| " << c.cell << " | " << c.n << " | " << fixed(c.mean) << " | " << fixed(c.sd) << " | " << fixed(c.sem)
       << " |\n";
  }

  md << "\n## Post-hoc paired t-tests (Bonferroni)\n\n";
  md << "| Comparison | Mean diff | t | df | p (raw) | p (adj) | m |\n|---|---|---|---|---|---|---|\n";
  for (const auto& p : r.posthoc) {
    md << "| " << p.a << " vs " << p.b << " | " << fixed(p.mean_difference) << " | "
       << (p.error ? "n/a" : fixed(p.t)) << " | " << p.df << " | " << pval(p.p_raw) << " | " << pval(p.p_adjusted)
       << " | " << p.family_size << " |\n";
  }

  auto corr_table = [&](const char* title, const std::vector<CorrelationReport>& v) {
    md << "\n## " << title << "\n\n";
    md << "| Cell | n | rho | p (raw) | p (adj) | m |\n|---|---|---|---|---|---|\n";
    for (const auto& c : v) {
      if (c.error) {
        md << "| " << c.cell << " | " << c.n << " | n/a | n/a | n/a | " << c.family_size << " |\n";
      } else {
        md << "| " << c.cell << " | " << c.n << " | " << fixed(c.rho) << " | " << pval(c.p_raw) << " | "
           << pval(c.p_adjusted) << " | " << c.family_size << " |\n";
      }
    }
  };
  corr_table("Sentiment vs rating (Pearson, subject means)", r.sentiment_correlations);
  corr_table("Alignment vs rating (Pearson, subject means)", r.alignment_correlations);

  md << "\n## Rating ~ sentiment + word count + reading ease (subject means)\n\n";
  md << "| Cell | n | b(sentiment) | SE | t | p | dropped |\n|---|---|---|---|---|---|---|\n";
  for (const auto& g : r.regressions) {
    if (g.error) {
      md << "| " << g.cell << " | " << g.n << " | n/a | n/a | n/a | n/a | " << *g.error << " |\n";
      continue;
    }
    const auto& s = g.result->sentiment();
    md << "| " << g.cell << " | " << g.n << " | " << fixed(s.estimate) << " | " << fixed(s.std_error) << " | "
       << fixed(s.t) << " | " << pval(s.p) << " | " << detail::join(g.result->dropped_covariates, ", ") << " |\n";
  }
  md << "\nReproducibility stamp: `" << r.stamp.dump() << "`\n";
  return md.str();
}

// Per-figure CSVs for external plotting.
inline void write_plot_data(const std::vector<SessionRecord>& sessions, const AnalysisConfig& cfg,
                            const std::filesystem::path& dir) {
  std::map<std::string, int> ignored;
  const auto data = collect(sessions, cfg, ignored);
  std::ostringstream means, sent, align;
  means << "subject_id,cell,mean_rating\r\n";
  sent << "subject_id,cell,mean_sentiment,mean_rating\r\n";
  align << "subject_id,cell,mean_alignment,mean_rating\r\n";
  for (const auto& d : data) {
    for (std::size_t c = 0; c < kCellCount; ++c) {
      const auto label = Condition::from_index(c).label();
      const auto id = storage::csv_field(d.subject_id);
      if (!d.ratings[c].empty()) {
        means << id << ',' << label << ',' << storage::format_number(stats::mean(d.ratings[c])) << "\r\n";
      }
      auto pair_row = [&](std::ostringstream& out, const std::vector<std::pair<double, double>>& v) {
        if (v.empty()) return;
        double sx = 0.0, sy = 0.0;
        for (auto [a, b] : v) {
          sx += a;
          sy += b;
        }
        out << id << ',' << label << ',' << storage::format_number(sx / v.size()) << ','
            << storage::format_number(sy / v.size()) << "\r\n";
      };
      pair_row(sent, d.sentiment_rating[c]);
      pair_row(align, d.alignment_rating[c]);
    }
  }
  storage::write_file_atomic(dir / "plot_mean_ratings.csv", means.str());
  storage::write_file_atomic(dir / "plot_sentiment.csv", sent.str());
  storage::write_file_atomic(dir / "plot_alignment.csv", align.str());
}

}  // namespace rlab::analysis
