#pragma once

// Desk-scale decoupled cross-attention conditioning.
//
// Text tokens and image tokens are attended separately with a shared query
// projection; the two attention outputs are merged as
//
//     O = O_text + image_scale * O_image
//
// image_scale = 1 is plain addition of the two streams. The same scalar is
// what generation requests carry as `image_scale`.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "rlab/domain.hpp"
#include "rlab/error.hpp"
#include "rlab/rng.hpp"

namespace rlab::conditioning {

// Dense row-major matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix from_rows(const std::vector<std::vector<double>>& rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.front().size() : 0;
    Matrix m(r, c);
    for (std::size_t i = 0; i < r; ++i) {
      require(rows[i].size() == c, ErrorKind::Shape, "ragged matrix rows");
      std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
    }
    return m;
  }

  static Matrix random_normal(std::size_t rows, std::size_t cols, double sd, std::uint64_t seed) {
    Matrix m(rows, cols);
    Rng rng(seed);
    for (auto& v : m.data_) v = rng.normal(0.0, sd);
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  std::vector<std::vector<double>> to_rows() const {
    std::vector<std::vector<double>> out(rows_);
    for (std::size_t i = 0; i < rows_; ++i) out[i].assign(row(i).begin(), row(i).end());
    return out;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), ErrorKind::Shape,
          "matmul shape mismatch: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " * " +
              std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  }
  return out;
}

enum class StreamKind : std::uint8_t { Text, Image };

// A sequence of token vectors, one per row.
struct TokenSequence {
  Matrix tokens;
  StreamKind kind = StreamKind::Text;

  std::size_t length() const { return tokens.rows(); }
  std::size_t dim() const { return tokens.cols(); }

  static TokenSequence from_embeddings(const std::vector<EmbeddingVector>& vs, StreamKind kind) {
    require(!vs.empty(), ErrorKind::Validation, "token sequence must contain at least one token");
    Matrix m(vs.size(), vs.front().dim());
    for (std::size_t i = 0; i < vs.size(); ++i) {
      require(vs[i].dim() == m.cols(), ErrorKind::Shape, "tokens differ in dimension");
      std::copy(vs[i].values.begin(), vs[i].values.end(), m.row(i).begin());
    }
    return {std::move(m), kind};
  }

  EmbeddingVector token(std::size_t i) const {
    auto r = tokens.row(i);
    return EmbeddingVector{{r.begin(), r.end()}};
  }

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

// Projection weights for one cross-attention block. W_Q is shared by both
// streams; the image stream has its own key/value projections.
struct AttentionParams {
  Matrix w_q;        // d_model x d_head
  Matrix w_k;        // d_model x d_head
  Matrix w_v;        // d_model x d_head
  Matrix w_k_image;  // d_model x d_head
  Matrix w_v_image;  // d_model x d_head
  std::size_t d_model = 0;
  std::size_t d_head = 0;

  void validate() const {
    for (const Matrix* m : {&w_q, &w_k, &w_v, &w_k_image, &w_v_image}) {
      require(m->rows() == d_model && m->cols() == d_head, ErrorKind::Shape,
              "projection matrix is not d_model x d_head");
    }
  }

  static AttentionParams random(std::size_t d_model, std::size_t d_head, std::uint64_t seed) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(d_model));
    AttentionParams p;
    p.d_model = d_model;
    p.d_head = d_head;
    p.w_q = Matrix::random_normal(d_model, d_head, sd, derive_seed(seed, {1}));
    p.w_k = Matrix::random_normal(d_model, d_head, sd, derive_seed(seed, {2}));
    p.w_v = Matrix::random_normal(d_model, d_head, sd, derive_seed(seed, {3}));
    p.w_k_image = Matrix::random_normal(d_model, d_head, sd, derive_seed(seed, {4}));
    p.w_v_image = Matrix::random_normal(d_model, d_head, sd, derive_seed(seed, {5}));
    return p;
  }
};

inline constexpr double kLayerNormEpsilon = 1e-5;
inline constexpr std::size_t kDefaultModelDim = 64;
inline constexpr std::size_t kDefaultImageTokens = 4;

// Linear layer followed by LayerNorm, mapping one global image embedding to
// a fixed-length sequence of image tokens.
struct ImageProjection {
  Matrix weight;              // d_in x (num_tokens * d_model)
  std::vector<double> bias;   // num_tokens * d_model
  std::vector<double> gamma;  // d_model
  std::vector<double> beta;   // d_model
  std::size_t num_tokens = kDefaultImageTokens;
  std::size_t d_model = kDefaultModelDim;

  static ImageProjection random(std::size_t d_in, std::size_t num_tokens, std::size_t d_model, std::uint64_t seed) {
    ImageProjection p;
    p.num_tokens = num_tokens;
    p.d_model = d_model;
    p.weight = Matrix::random_normal(d_in, num_tokens * d_model, 1.0, seed);
    p.bias.assign(num_tokens * d_model, 0.0);
    p.gamma.assign(d_model, 1.0);
    p.beta.assign(d_model, 0.0);
    return p;
  }
};

// In-place LayerNorm of one token. An all-constant token normalizes to zeros
// because the epsilon keeps the denominator away from 0.
inline void layer_norm(std::span<double> x, std::span<const double> gamma, std::span<const double> beta,
                       double eps = kLayerNormEpsilon) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - mean) * inv * gamma[i] + beta[i];
}

inline TokenSequence project_image_embedding(const EmbeddingVector& global_embedding, std::size_t num_tokens,
                                             const ImageProjection& proj) {
  require(num_tokens >= 1, ErrorKind::Validation, "num_tokens must be >= 1");
  require(num_tokens == proj.num_tokens, ErrorKind::Shape, "num_tokens differs from the projection's token count");
  require(global_embedding.dim() == proj.weight.rows(), ErrorKind::Shape,
          "embedding dim " + std::to_string(global_embedding.dim()) + " does not match projection input " +
              std::to_string(proj.weight.rows()));
  require(proj.weight.cols() == num_tokens * proj.d_model && proj.bias.size() == proj.weight.cols() &&
              proj.gamma.size() == proj.d_model && proj.beta.size() == proj.d_model,
          ErrorKind::Shape, "inconsistent projection parameters");

  Matrix tokens(num_tokens, proj.d_model);
  const auto& x = global_embedding.values;
  for (std::size_t j = 0; j < proj.weight.cols(); ++j) {
    double acc = proj.bias[j];
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * proj.weight(i, j);
    tokens(j / proj.d_model, j % proj.d_model) = acc;
  }
  for (std::size_t t = 0; t < num_tokens; ++t) layer_norm(tokens.row(t), proj.gamma, proj.beta);
  return {std::move(tokens), StreamKind::Image};
}

struct AttentionOutput {
  TokenSequence output;  // queries x d_head
  Matrix weights;        // queries x context; each row sums to 1
};

// softmax(Q K^T / sqrt(d_head)) V with Q = queries * w_q, K = context * k_proj,
// V = context * v_proj.
inline AttentionOutput cross_attention_detailed(const TokenSequence& queries, const TokenSequence& context,
                                                const Matrix& k_proj, const Matrix& v_proj, const Matrix& w_q) {
  require(context.length() >= 1, ErrorKind::Validation, "cross_attention requires a non-empty context");
  require(queries.length() >= 1, ErrorKind::Validation, "cross_attention requires at least one query");
  require(w_q.cols() == k_proj.cols() && k_proj.rows() == context.dim() && v_proj.rows() == context.dim(),
          ErrorKind::Shape, "attention projection shapes are inconsistent");

  const Matrix q = matmul(queries.tokens, w_q);
  const Matrix k = matmul(context.tokens, k_proj);
  const Matrix v = matmul(context.tokens, v_proj);
  const double scale = 1.0 / std::sqrt(static_cast<double>(w_q.cols()));

  Matrix weights(q.rows(), k.rows());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    double max_logit = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k.rows(); ++j) {
      double dot = 0.0;
      for (std::size_t d = 0; d < q.cols(); ++d) dot += q(i, d) * k(j, d);
      weights(i, j) = dot * scale;
      max_logit = std::max(max_logit, weights(i, j));
    }
    double total = 0.0;
    for (std::size_t j = 0; j < k.rows(); ++j) {
      weights(i, j) = std::exp(weights(i, j) - max_logit);
      total += weights(i, j);
    }
    for (std::size_t j = 0; j < k.rows(); ++j) weights(i, j) /= total;
  }
  return {TokenSequence{matmul(weights, v), queries.kind}, std::move(weights)};
}

inline TokenSequence cross_attention(const TokenSequence& queries, const TokenSequence& context,
                                     const Matrix& k_proj, const Matrix& v_proj, const AttentionParams& params) {
  params.validate();
  require(queries.dim() == params.d_model, ErrorKind::Shape, "query tokens must have dim d_model");
  return cross_attention_detailed(queries, context, k_proj, v_proj, params.w_q).output;
}

inline TokenSequence combine_streams(const TokenSequence& text_out, const TokenSequence& image_out, double image_scale) {
  require(text_out.length() == image_out.length() && text_out.dim() == image_out.dim(), ErrorKind::Shape,
          "combine_streams requires equal shapes");
  require(image_scale >= 0.0 && image_scale <= 1.0, ErrorKind::Validation, "image_scale must lie in [0,1]");
  TokenSequence out = text_out;
  auto& d = out.tokens.data();
  const auto& img = image_out.tokens.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += image_scale * img[i];
  return out;
}

// Full decoupled block: text and image contexts attended with the shared
// query projection, outputs merged with combine_streams.
inline TokenSequence decoupled_cross_attention(const TokenSequence& queries, const TokenSequence& text_context,
                                               const TokenSequence& image_context, const AttentionParams& params,
                                               double image_scale) {
  const auto text_out = cross_attention(queries, text_context, params.w_k, params.w_v, params);
  const auto image_out = cross_attention(queries, image_context, params.w_k_image, params.w_v_image, params);
  return combine_streams(text_out, image_out, image_scale);
}

// Classifier-free guidance dropout. The probabilities are those of the
// mutually exclusive outcomes "drop image only", "drop text only" and "drop
// both"; the remainder is "keep both".
struct DropoutConfig {
  double p_drop_image = 0.05;
  double p_drop_text = 0.05;
  double p_drop_both = 0.05;

  void validate() const {
    for (double p : {p_drop_image, p_drop_text, p_drop_both}) {
      require(p >= 0.0 && p <= 1.0, ErrorKind::Validation, "dropout probability outside [0,1]");
    }
    require(p_drop_image + p_drop_text + p_drop_both <= 1.0 + 1e-12, ErrorKind::Validation,
            "dropout outcome probabilities sum to more than 1");
  }
};

struct ConditioningConfig {
  double image_scale = kDefaultImageScale;
  DropoutConfig dropout;

  void validate() const {
    require(image_scale >= 0.0 && image_scale <= 1.0, ErrorKind::Validation, "image_scale must lie in [0,1]");
    dropout.validate();
  }
};

enum class DropMask : std::uint8_t { None, Image, Text, Both };

inline std::string_view to_string(DropMask m) {
  switch (m) {
    case DropMask::None: return "none";
    case DropMask::Image: return "image";
    case DropMask::Text: return "text";
    case DropMask::Both: return "both";
  }
  return "none";
}

struct DropoutResult {
  TokenSequence text;
  TokenSequence image;
  DropMask mask = DropMask::None;
};

inline DropMask draw_dropout_mask(const DropoutConfig& dropout, std::uint64_t rng_seed) {
  dropout.validate();
  Rng rng(splitmix64(rng_seed));
  const double u = rng.uniform();
  if (u < dropout.p_drop_both) return DropMask::Both;
  if (u < dropout.p_drop_both + dropout.p_drop_image) return DropMask::Image;
  if (u < dropout.p_drop_both + dropout.p_drop_image + dropout.p_drop_text) return DropMask::Text;
  return DropMask::None;
}

inline DropoutResult apply_conditioning_dropout(const TokenSequence& text, const TokenSequence& image,
                                                const DropoutConfig& dropout, std::uint64_t rng_seed) {
  DropoutResult r{text, image, draw_dropout_mask(dropout, rng_seed)};
  auto null_out = [](TokenSequence& s) { std::fill(s.tokens.data().begin(), s.tokens.data().end(), 0.0); };
  if (r.mask == DropMask::Text || r.mask == DropMask::Both) null_out(r.text);
  if (r.mask == DropMask::Image || r.mask == DropMask::Both) null_out(r.image);
  return r;
}

inline constexpr double kDefaultMockNoise = 0.01;

// Deterministic stand-in for the diffusion backend: the single-token case of
// combine_streams, normalized, plus a seeded perturbation of norm `epsilon`.
inline EmbeddingVector mock_generate(const EmbeddingVector& prompt_embedding, const EmbeddingVector& reference_embedding,
                                     double image_scale, std::uint64_t seed, double epsilon = kDefaultMockNoise) {
  require(prompt_embedding.dim() == reference_embedding.dim() && prompt_embedding.dim() > 0, ErrorKind::Shape,
          "prompt and reference embeddings must share a non-zero dimension");
  const auto text = TokenSequence::from_embeddings({prompt_embedding}, StreamKind::Text);
  const auto image = TokenSequence::from_embeddings({reference_embedding}, StreamKind::Image);
  EmbeddingVector out = combine_streams(text, image, image_scale).token(0);

  const double norm = out.norm();
  require(norm > 1e-12 && std::isfinite(norm), ErrorKind::DegenerateInput,
          "combined conditioning vector has zero norm");
  for (auto& v : out.values) v /= norm;

  if (epsilon > 0.0) {
    Rng rng(derive_seed(seed, {0x6d6f636bULL}));
    std::vector<double> noise(out.dim());
    double nn = 0.0;
    for (auto& v : noise) {
      v = rng.normal();
      nn += v * v;
    }
    nn = std::sqrt(nn);
    for (std::size_t i = 0; i < noise.size(); ++i) out.values[i] += epsilon * noise[i] / nn;
  }
  return out;
}

}  // namespace rlab::conditioning
