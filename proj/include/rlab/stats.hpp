#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rlab/domain.hpp"
#include "rlab/error.hpp"

namespace rlab::stats {

// ---------------------------------------------------------------------------
// Distribution tails

namespace detail {

// Continued fraction for the incomplete beta function, modified Lentz.
inline double beta_continued_fraction(double x, double a, double b) {
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  return h;
}

}  // namespace detail

// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double x, double a, double b) {
  require(a > 0.0 && b > 0.0, ErrorKind::Validation, "incomplete_beta requires a, b > 0");
  require(x >= 0.0 && x <= 1.0, ErrorKind::Validation, "incomplete_beta requires x in [0,1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(x, a, b) / a;
  return 1.0 - front * detail::beta_continued_fraction(1.0 - x, b, a) / b;
}

// P(|T| >= |t|) for Student-t with df degrees of freedom.
inline double student_t_two_tailed(double t, double df) {
  require(df > 0.0, ErrorKind::Validation, "degrees of freedom must be positive");
  if (std::isnan(t)) return std::numeric_limits<double>::quiet_NaN();
  if (std::isinf(t)) return 0.0;
  const double t2 = t * t;
  // I_{df/(df+t^2)}(df/2, 1/2), with the complementary form for small t to
  // keep precision when the tail probability is close to 1.
  if (t2 < df) return 1.0 - incomplete_beta(t2 / (df + t2), 0.5, df / 2.0);
  return incomplete_beta(df / (df + t2), df / 2.0, 0.5);
}

// Upper tail P(F >= f) for the F(d1, d2) distribution.
inline double f_upper_tail(double f, double d1, double d2) {
  require(d1 > 0.0 && d2 > 0.0, ErrorKind::Validation, "degrees of freedom must be positive");
  if (std::isinf(f)) return 0.0;
  if (f <= 0.0) return 1.0;
  const double x = d2 / (d2 + d1 * f);
  if (x > 0.5) return 1.0 - incomplete_beta(1.0 - x, d1 / 2.0, d2 / 2.0);
  return incomplete_beta(x, d2 / 2.0, d1 / 2.0);
}

// ---------------------------------------------------------------------------
// Descriptives

inline double mean(std::span<const double> x) {
  require(!x.empty(), ErrorKind::Validation, "mean of empty sample");
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

// Sample standard deviation (n - 1 denominator); 0 for a single value.
inline double sample_sd(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  const double m = mean(x);
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(x.size() - 1));
}

inline double sem(std::span<const double> x) {
  return x.empty() ? 0.0 : sample_sd(x) / std::sqrt(static_cast<double>(x.size()));
}

// ---------------------------------------------------------------------------

struct Correlation {
  double rho = 0.0;
  double p_two_tailed = 1.0;
  std::size_t n = 0;
};

inline Correlation pearson(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), ErrorKind::Validation, "pearson requires equal-length series");
  require(x.size() >= 3, ErrorKind::Validation, "pearson requires n >= 3");
  const double mx = mean(x);
  const double my = mean(y);
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  require(sxx > 0.0 && syy > 0.0, ErrorKind::DegenerateVariance, "pearson on a constant series");
  const double rho = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  const double df = static_cast<double>(x.size()) - 2.0;
  double p = 0.0;
  if (std::abs(rho) < 1.0) p = student_t_two_tailed(rho * std::sqrt(df / (1.0 - rho * rho)), df);
  return {rho, p, x.size()};
}

struct TTest {
  double t = 0.0;
  int df = 0;
  double p_two_tailed = 1.0;
  double mean_difference = 0.0;
};

inline TTest paired_t(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), ErrorKind::Validation, "paired_t requires equal-length samples");
  require(x.size() >= 2, ErrorKind::Validation, "paired_t requires n >= 2");
  std::vector<double> d(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) d[i] = x[i] - y[i];
  const double md = mean(d);
  const double sd = sample_sd(d);
  require(sd > 0.0, ErrorKind::DegenerateVariance, "paired differences have zero variance");
  const double n = static_cast<double>(d.size());
  const double t = md / (sd / std::sqrt(n));
  const int df = static_cast<int>(d.size()) - 1;
  return {t, df, student_t_two_tailed(t, df), md};
}

inline std::vector<double> bonferroni(std::span<const double> p_raw, int m) {
  require(m >= 1, ErrorKind::Validation, "Bonferroni family size must be >= 1");
  require(static_cast<std::size_t>(m) >= p_raw.size(), ErrorKind::Validation,
          "Bonferroni family size is smaller than the number of tests");
  std::vector<double> out(p_raw.size());
  for (std::size_t i = 0; i < p_raw.size(); ++i) out[i] = std::min(1.0, m * p_raw[i]);
  return out;
}

// ---------------------------------------------------------------------------
// 2 x 2 x 2 repeated-measures ANOVA

struct SubjectCells {
  std::string subject_id;
  std::array<std::optional<double>, kCellCount> cells{};  // indexed by Condition::index()
};

struct AnovaEffect {
  std::string name;
  double F = 0.0;
  int df_num = 1;
  int df_den = 0;
  double p = 1.0;
  double ss_effect = 0.0;
  double ss_error = 0.0;
};

struct AnovaTable {
  std::vector<AnovaEffect> effects;  // emotion, instruction, modality, then interactions
  std::size_t n_subjects = 0;

  const AnovaEffect& at(std::string_view name) const {
    for (const auto& e : effects) {
      if (e.name == name) return e;
    }
    fail(ErrorKind::Validation, "no ANOVA effect named '" + std::string(name) + "'");
  }
};

struct EffectSpec {
  const char* name;
  unsigned factors;  // bit 0 = emotion, 1 = instruction, 2 = modality
};

inline constexpr std::array<EffectSpec, 7> kAnovaEffects{{
    {"emotion", 0b001},
    {"instruction", 0b010},
    {"modality", 0b100},
    {"emotion:instruction", 0b011},
    {"emotion:modality", 0b101},
    {"instruction:modality", 0b110},
    {"emotion:instruction:modality", 0b111},
}};

// +1/-1 contrast weight of cell `cell` for an effect over `factors`.
inline int contrast_weight(unsigned factors, std::size_t cell) {
  const auto c = Condition::from_index(cell);
  int w = 1;
  if (factors & 0b001) w *= c.emotion == Emotion::Negative ? 1 : -1;
  if (factors & 0b010) w *= c.instruction == Instruction::Describe ? 1 : -1;
  if (factors & 0b100) w *= c.modality == Modality::NoAI ? 1 : -1;
  return w;
}

// Sums of squares come from the classical decomposition into marginal-mean
// effect terms; for each effect E, F = MS_E / MS_(E x subject) with
// df = (1, n - 1). With two-level factors no sphericity correction applies.
inline AnovaTable rm_anova_2x2x2(const std::vector<SubjectCells>& data) {
  const std::size_t n = data.size();
  require(n >= 2, ErrorKind::Validation, "repeated-measures ANOVA requires at least 2 subjects");
  for (const auto& s : data) {
    for (std::size_t c = 0; c < kCellCount; ++c) {
      if (!s.cells[c] || !std::isfinite(*s.cells[c])) {
        fail(ErrorKind::Validation,
             "subject '" + s.subject_id + "' is missing cell " + Condition::from_index(c).label());
      }
    }
  }

  // Factor order in subset masks: bit 0 emotion, bit 1 instruction,
  // bit 2 modality, bit 3 subject.
  auto level = [](std::size_t cell, unsigned factor_bit) -> std::size_t {
    const auto c = Condition::from_index(cell);
    switch (factor_bit) {
      case 0: return static_cast<std::size_t>(c.emotion);
      case 1: return static_cast<std::size_t>(c.instruction);
      default: return static_cast<std::size_t>(c.modality);
    }
  };

  const std::size_t total = n * kCellCount;
  auto y = [&](std::size_t s, std::size_t c) { return *data[s].cells[c]; };

  // marginal[U][s*8 + c] = mean over all observations sharing (s, c)'s
  // levels on the factors in U.
  std::array<std::vector<double>, 16> marginal;
  for (unsigned u = 0; u < 16; ++u) {
    marginal[u].assign(total, 0.0);
    const bool keep_subject = (u & 0b1000) != 0;
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t c = 0; c < kCellCount; ++c) {
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t s2 = 0; s2 < n; ++s2) {
          if (keep_subject && s2 != s) continue;
          for (std::size_t c2 = 0; c2 < kCellCount; ++c2) {
            bool match = true;
            for (unsigned f = 0; f < 3 && match; ++f) {
              if ((u >> f) & 1u) match = level(c, f) == level(c2, f);
            }
            if (!match) continue;
            sum += y(s2, c2);
            ++count;
          }
        }
        marginal[u][s * kCellCount + c] = sum / static_cast<double>(count);
      }
    }
  }

  auto sum_of_squares = [&](unsigned t) {
    double ss = 0.0;
    for (std::size_t i = 0; i < total; ++i) {
      double e = 0.0;
      for (unsigned u = 0; u < 16; ++u) {
        if ((u & ~t) != 0) continue;  // U must be a subset of T
        const int sign = (std::popcount(t) - std::popcount(u)) % 2 == 0 ? 1 : -1;
        e += sign * marginal[u][i];
      }
      ss += e * e;
    }
    return ss;
  };

  double scale = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t c = 0; c < kCellCount; ++c) scale += y(s, c) * y(s, c);
  }
  const double negligible = 1e-24 * std::max(scale, std::numeric_limits<double>::min());

  AnovaTable table;
  table.n_subjects = n;
  const int df_den = static_cast<int>(n) - 1;
  for (const auto& spec : kAnovaEffects) {
    AnovaEffect e;
    e.name = spec.name;
    e.df_num = 1;
    e.df_den = df_den;
    e.ss_effect = sum_of_squares(spec.factors);
    e.ss_error = sum_of_squares(spec.factors | 0b1000);
    if (e.ss_effect <= negligible) {
      e.F = 0.0;
      e.p = 1.0;
    } else if (e.ss_error <= negligible) {
      e.F = std::numeric_limits<double>::infinity();
      e.p = 0.0;
    } else {
      e.F = e.ss_effect / (e.ss_error / df_den);
      e.p = f_upper_tail(e.F, 1.0, df_den);
    }
    table.effects.push_back(std::move(e));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Ordinary least squares (Householder QR)

struct Coefficient {
  std::string name;
  double estimate = 0.0;
  double std_error = 0.0;
  double t = 0.0;
  double p = 1.0;
};

struct OlsFit {
  std::vector<Coefficient> coefficients;
  int df_residual = 0;
  double rss = 0.0;
  double r_squared = 0.0;

  const Coefficient& at(std::string_view name) const {
    for (const auto& c : coefficients) {
      if (c.name == name) return c;
    }
    fail(ErrorKind::Validation, "no coefficient named '" + std::string(name) + "'");
  }
};

// Fits y = X b. `columns` holds the predictors column-wise (caller adds the
// intercept column if wanted).
inline OlsFit ols(const std::vector<std::vector<double>>& columns, const std::vector<std::string>& names,
                  std::span<const double> y) {
  const std::size_t p = columns.size();
  const std::size_t n = y.size();
  require(p >= 1 && names.size() == p, ErrorKind::Validation, "ols needs one name per column");
  require(n > p, ErrorKind::Validation, "ols requires more observations than predictors");
  for (const auto& col : columns) require(col.size() == n, ErrorKind::Shape, "ols column length mismatch");

  // a: n x p column-major working copy.
  std::vector<std::vector<double>> a = columns;
  std::vector<double> qty(y.begin(), y.end());
  std::vector<double> col_norm(p);
  for (std::size_t j = 0; j < p; ++j) {
    double s = 0.0;
    for (double v : a[j]) s += v * v;
    col_norm[j] = std::sqrt(s);
  }

  for (std::size_t k = 0; k < p; ++k) {
    double norm = 0.0;
    for (std::size_t i = k; i < n; ++i) norm += a[k][i] * a[k][i];
    norm = std::sqrt(norm);
    if (norm <= 1e-10 * std::max(col_norm[k], 1e-300)) {
      fail(ErrorKind::Collinearity, "predictor '" + names[k] + "' is collinear with earlier predictors");
    }
    const double alpha = a[k][k] > 0 ? -norm : norm;
    std::vector<double> v(n, 0.0);
    v[k] = a[k][k] - alpha;
    for (std::size_t i = k + 1; i < n; ++i) v[i] = a[k][i];
    double vnorm2 = 0.0;
    for (std::size_t i = k; i < n; ++i) vnorm2 += v[i] * v[i];
    auto reflect = [&](std::vector<double>& target) {
      double dot = 0.0;
      for (std::size_t i = k; i < n; ++i) dot += v[i] * target[i];
      const double f = 2.0 * dot / vnorm2;
      for (std::size_t i = k; i < n; ++i) target[i] -= f * v[i];
    };
    for (std::size_t j = k; j < p; ++j) reflect(a[j]);
    reflect(qty);
  }

  // R is a[j][i] for i <= j. Back-substitute R b = (Q^T y)[0..p).
  std::vector<double> b(p, 0.0);
  for (std::size_t ii = p; ii-- > 0;) {
    double s = qty[ii];
    for (std::size_t j = ii + 1; j < p; ++j) s -= a[j][ii] * b[j];
    b[ii] = s / a[ii][ii];
  }

  double rss = 0.0;
  for (std::size_t i = p; i < n; ++i) rss += qty[i] * qty[i];
  const int df = static_cast<int>(n - p);
  const double sigma2 = rss / df;

  // diag((R^T R)^-1) = row norms of R^-1.
  std::vector<std::vector<double>> rinv(p, std::vector<double>(p, 0.0));
  for (std::size_t c = 0; c < p; ++c) {
    for (std::size_t ii = p; ii-- > 0;) {
      double s = ii == c ? 1.0 : 0.0;
      for (std::size_t j = ii + 1; j < p; ++j) s -= a[j][ii] * rinv[j][c];
      rinv[ii][c] = s / a[ii][ii];
    }
  }

  const double my = mean(y);
  double tss = 0.0;
  for (double v : y) tss += (v - my) * (v - my);

  OlsFit fit;
  fit.df_residual = df;
  fit.rss = rss;
  fit.r_squared = tss > 0.0 ? 1.0 - rss / tss : 0.0;
  for (std::size_t j = 0; j < p; ++j) {
    double var = 0.0;
    for (std::size_t c = 0; c < p; ++c) var += rinv[j][c] * rinv[j][c];
    Coefficient coef;
    coef.name = names[j];
    coef.estimate = b[j];
    coef.std_error = std::sqrt(sigma2 * var);
    if (coef.std_error > 0.0) {
      coef.t = coef.estimate / coef.std_error;
      coef.p = student_t_two_tailed(coef.t, df);
    } else {
      coef.t = coef.estimate == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), coef.estimate);
      coef.p = coef.estimate == 0.0 ? 1.0 : 0.0;
    }
    fit.coefficients.push_back(coef);
  }
  return fit;
}

struct CovariateRegression {
  OlsFit fit;
  std::vector<std::string> dropped_covariates;  // constant columns removed before fitting

  const Coefficient& sentiment() const { return fit.at("sentiment"); }
};

// rating ~ 1 + sentiment + word_count + reading_ease. A covariate that is
// constant across observations carries no information beyond the intercept
// and is dropped (and reported); any other rank deficiency is an error.
inline CovariateRegression regression_with_covariates(std::span<const double> rating, std::span<const double> sentiment,
                                                      std::span<const double> word_count,
                                                      std::span<const double> reading_ease) {
  const std::size_t n = rating.size();
  require(sentiment.size() == n && word_count.size() == n && reading_ease.size() == n, ErrorKind::Validation,
          "regression inputs differ in length");
  auto is_constant = [](std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
  };
  require(!is_constant(sentiment), ErrorKind::Collinearity, "sentiment predictor is constant");

  CovariateRegression out;
  std::vector<std::vector<double>> cols{std::vector<double>(n, 1.0), {sentiment.begin(), sentiment.end()}};
  std::vector<std::string> names{"intercept", "sentiment"};
  auto add = [&](std::span<const double> v, const char* name) {
    if (is_constant(v)) {
      out.dropped_covariates.emplace_back(name);
      return;
    }
    cols.emplace_back(v.begin(), v.end());
    names.emplace_back(name);
  };
  add(word_count, "word_count");
  add(reading_ease, "reading_ease");
  out.fit = ols(cols, names, rating);
  return out;
}

}  // namespace rlab::stats
