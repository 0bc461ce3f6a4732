#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "rlab/domain.hpp"
#include "rlab/error.hpp"

namespace rlab::text {

// cos(theta) = a.b / (|a||b|)
inline double cosine_alignment(const EmbeddingVector& a, const EmbeddingVector& b) {
  require(a.dim() == b.dim(), ErrorKind::Shape, "alignment requires equal embedding dimensions");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) {
    dot += a.values[i] * b.values[i];
    na += a.values[i] * a.values[i];
    nb += b.values[i] * b.values[i];
  }
  require(na > 0.0 && nb > 0.0, ErrorKind::DegenerateInput, "alignment of a zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

// Polarity index: P(negative) * -1 + P(neutral) * 0 + P(positive) * +1.
inline double sentiment_score(const SentimentProbabilities& p) {
  for (double v : {p.p_negative, p.p_neutral, p.p_positive}) {
    require(v >= 0.0 && v <= 1.0 && std::isfinite(v), ErrorKind::Validation,
            "sentiment probability outside [0,1]");
  }
  require(std::abs(p.p_negative + p.p_neutral + p.p_positive - 1.0) <= 1e-6, ErrorKind::Validation,
          "sentiment probabilities do not sum to 1");
  return p.p_positive - p.p_negative;
}

inline bool is_vowel(char c) {
  switch (std::tolower(static_cast<unsigned char>(c))) {
    case 'a': case 'e': case 'i': case 'o': case 'u': case 'y': return true;
    default: return false;
  }
}

// Syllable heuristic: count maximal vowel groups (a e i o u y), subtract one
// for a silent final 'e' (but not "-le"), never below one.
inline int count_syllables(std::string_view word) {
  std::string w;
  for (char c : word) {
    if (std::isalpha(static_cast<unsigned char>(c))) w.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  if (w.empty()) return 0;
  int groups = 0;
  bool prev_vowel = false;
  for (char c : w) {
    const bool v = is_vowel(c);
    if (v && !prev_vowel) ++groups;
    prev_vowel = v;
  }
  const std::size_t n = w.size();
  if (n >= 2 && w[n - 1] == 'e' && !is_vowel(w[n - 2]) && !(n >= 3 && w[n - 2] == 'l' && !is_vowel(w[n - 3])) &&
      groups > 1) {
    --groups;
  }
  return std::max(groups, 1);
}

// Words are whitespace tokens containing at least one letter or digit.
inline std::vector<std::string> words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    bool has_alnum = false;
    for (char c : cur) has_alnum |= std::isalnum(static_cast<unsigned char>(c)) != 0;
    if (has_alnum) out.push_back(cur);
    cur.clear();
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) flush();
    else cur.push_back(c);
  }
  flush();
  return out;
}

// Sentences are runs of text ending in '.', '!' or '?' (or end of text) that
// contain at least one word.
inline int count_sentences(std::string_view text) {
  int sentences = 0;
  bool has_word_char = false;
  for (char c : text) {
    if (c == '.' || c == '!' || c == '?') {
      if (has_word_char) ++sentences;
      has_word_char = false;
    } else if (std::isalnum(static_cast<unsigned char>(c))) {
      has_word_char = true;
    }
  }
  if (has_word_char) ++sentences;
  return sentences;
}

struct ReadabilityCounts {
  int words = 0;
  int sentences = 0;
  int syllables = 0;
};

inline ReadabilityCounts readability_counts(std::string_view text) {
  ReadabilityCounts c;
  for (const auto& w : words(text)) {
    ++c.words;
    c.syllables += count_syllables(w);
  }
  c.sentences = count_sentences(text);
  return c;
}

// 206.835 - 1.015 (words / sentences) - 84.6 (syllables / words)
inline double flesch_reading_ease(std::string_view english_text) {
  const auto c = readability_counts(english_text);
  require(c.words >= 1, ErrorKind::Validation, "Flesch Reading Ease needs at least one word");
  require(c.sentences >= 1, ErrorKind::Validation, "Flesch Reading Ease needs at least one sentence");
  return 206.835 - 1.015 * (static_cast<double>(c.words) / c.sentences) -
         84.6 * (static_cast<double>(c.syllables) / c.words);
}

}  // namespace rlab::text
