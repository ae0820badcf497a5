#pragma once
// Finite-difference check of the alignment loss with respect to W_c, b_c
// and the word embeddings that feed each expression.

#include <random>
#include <vector>

#include "kbalign/align.hpp"
#include "oracles.hpp"

namespace aligncheck {

struct Case {
  std::size_t d_e = 0, d_v = 0, tokens = 0;
  std::vector<double> words;  // tokens x d_e
  std::vector<kbalign::MatchSpan> spans;
  std::vector<std::vector<double>> targets;
  kbalign::Projection<double> proj;
};

inline Case random_case(std::mt19937_64& rng, std::size_t max_d = 16) {
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  std::normal_distribution<double> g(0.0, 1.0);
  Case c;
  c.d_e = pick(1, max_d);
  c.d_v = pick(1, max_d);
  c.tokens = pick(1, 12);
  c.words.resize(c.tokens * c.d_e);
  for (auto& w : c.words) w = g(rng);
  std::size_t pos = pick(0, 1);
  while (pos < c.tokens) {
    const std::size_t len = std::min(pick(1, 3), c.tokens - pos);
    c.spans.push_back({pos, pos + len, 0});
    pos += len + pick(0, 2);
  }
  for (std::size_t k = 0; k < c.spans.size(); ++k) {
    std::vector<double> v(c.d_v);
    for (auto& x : v) x = g(rng);
    c.targets.push_back(std::move(v));
  }
  c.proj = kbalign::Projection<double>::init(c.d_e, c.d_v, rng());
  for (auto& b : c.proj.bias) b = 0.3 * g(rng);
  return c;
}

inline kbalign::AlignmentBatch<double> batch_of(const Case& c) {
  kbalign::AlignmentBatch<double> b;
  kbalign::ConstMatrixView<double> words{c.words.data(), c.tokens, c.d_e};
  for (std::size_t k = 0; k < c.spans.size(); ++k) {
    b.spans.push_back(c.spans[k]);
    b.c.push_back(kbalign::expression_embedding(words, c.spans[k]));
    b.v.push_back(c.targets[k]);
  }
  return b;
}

// Analytic gradient with respect to every word vector: each token of span
// k receives the expression gradient of k.
inline std::vector<double> word_gradients(const Case& c, const kbalign::AlignmentGradients<double>& g) {
  std::vector<double> out(c.words.size(), 0.0);
  for (std::size_t k = 0; k < c.spans.size(); ++k) {
    for (std::size_t t = c.spans[k].start; t < c.spans[k].end; ++t) {
      for (std::size_t j = 0; j < c.d_e; ++j) out[t * c.d_e + j] += g.c[k][j];
    }
  }
  return out;
}

inline double check(Case& c, kbalign::AlignmentVariant variant, double h = 1e-5, double floor = 1e-5) {
  const auto g = kbalign::alignment_gradients(batch_of(c), c.proj, variant);
  const auto gw = word_gradients(c, g);
  auto f = [&] { return double(kbalign::alignment_loss(batch_of(c), c.proj, variant)); };
  double worst = 0.0;
  for (std::size_t i = 0; i < c.proj.weight.size(); ++i) {
    worst = std::max(worst, oracle::rel_error(g.weight[i], oracle::central_difference(c.proj.weight, i, f, h), floor));
  }
  for (std::size_t i = 0; i < c.proj.bias.size(); ++i) {
    worst = std::max(worst, oracle::rel_error(g.bias[i], oracle::central_difference(c.proj.bias, i, f, h), floor));
  }
  for (std::size_t i = 0; i < c.words.size(); ++i) {
    worst = std::max(worst, oracle::rel_error(gw[i], oracle::central_difference(c.words, i, f, h), floor));
  }
  return worst;
}

}  // namespace aligncheck
