#pragma once
// Random small models in 64-bit mode and a finite-difference check of the
// main-task losses through the whole encoder.

#include <random>
#include <vector>

#include "kbalign/model.hpp"
#include "oracles.hpp"

namespace modelcheck {

using kbalign::HeadKind;
using kbalign::TokenId;

struct Case {
  kbalign::ModelConfig config;
  std::vector<double> params;
  std::vector<TokenId> ids;
  std::vector<double> visual;
  std::size_t visual_rows = 0;
  HeadKind head = HeadKind::Classification;
  std::vector<std::size_t> positions;  // masked-token head
  std::vector<std::size_t> labels;     // one per position, or one label
};

inline constexpr TokenId kPad = 0;

inline Case random_case(std::mt19937_64& rng, HeadKind head, std::size_t max_d = 16) {
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  Case c;
  auto& m = c.config;
  m.heads = pick(1, 2);
  m.d_e = m.heads * pick(1, max_d / m.heads);
  m.d_v = pick(1, max_d);
  m.vocab_size = pick(3, 12);
  m.text_layers = pick(1, 2);
  m.cross_layers = pick(1, 2);
  m.ffn_dim = pick(2, 12);
  m.max_text_len = pick(2, 6);
  m.visual_dim = pick(1, 5);
  m.num_answers = pick(2, 4);
  m.text_only = std::bernoulli_distribution(0.3)(rng);
  c.head = head;

  kbalign::Encoder<double> enc(m);
  c.params = enc.init_params(rng());
  // Lift LayerNorm gains and biases off their defaults so every path carries gradient.
  std::normal_distribution<double> noise(0.0, 0.2);
  for (auto& p : c.params) p += noise(rng);

  const std::size_t n = pick(1, m.max_text_len);
  std::uniform_int_distribution<TokenId> tok(1, static_cast<TokenId>(m.vocab_size - 1));
  for (std::size_t i = 0; i < n; ++i) c.ids.push_back(tok(rng));
  // Trailing padding, never at position 0.
  const std::size_t pads = n > 1 ? pick(0, n - 1) : 0;
  for (std::size_t i = n - pads; i < n; ++i) c.ids[i] = kPad;

  if (!m.text_only) {
    c.visual_rows = pick(1, 3);
    std::normal_distribution<double> g(0.0, 1.0);
    c.visual.resize(c.visual_rows * m.visual_dim);
    for (auto& v : c.visual) v = g(rng);
  }

  if (head == HeadKind::MaskedToken) {
    for (std::size_t i = 0; i < n - pads; ++i) {
      if (c.positions.empty() || std::bernoulli_distribution(0.5)(rng)) {
        c.positions.push_back(i);
        c.labels.push_back(pick(0, m.vocab_size - 1));
      }
    }
  } else if (head == HeadKind::Classification) {
    c.labels = {pick(0, m.num_answers - 1)};
  } else {
    c.labels = {pick(0, 1)};
  }
  return c;
}

// Loss and, when `grads` is non-null, its gradient over all parameters.
inline double evaluate(const kbalign::Encoder<double>& enc, const Case& c, std::span<const double> params,
                       std::vector<double>* grads) {
  kbalign::ForwardState<double> s;
  kbalign::ExampleInput<double> in;
  in.ids = c.ids;
  in.visual = c.visual;
  in.visual_rows = c.visual_rows;
  enc.forward(params, in, kPad, s);
  const std::size_t d = enc.config().d_e;
  if (grads) grads->assign(enc.param_count(), 0.0);
  std::vector<double> d_hidden(s.n * d, 0.0), d_pooled(d, 0.0);

  double loss = 0.0;
  if (c.head == HeadKind::MaskedToken) {
    const std::size_t V = enc.config().vocab_size;
    std::vector<double> logits(c.positions.size() * V), g(logits.size());
    enc.mlm_logits(params, s, c.positions, logits);
    loss = kbalign::main_loss<double>({logits.data(), c.positions.size(), V}, c.labels, c.head,
                                      {g.data(), c.positions.size(), V});
    if (grads) enc.mlm_backward(params, s, c.positions, g, d_hidden, *grads);
  } else if (c.head == HeadKind::Classification) {
    const std::size_t K = enc.config().num_answers;
    std::vector<double> logits(K), g(K);
    enc.classifier_logits(params, s, logits);
    loss = kbalign::main_loss<double>({logits.data(), 1, K}, c.labels, c.head, {g.data(), 1, K});
    if (grads) enc.classifier_backward(params, s, g, d_pooled, *grads);
  } else {
    double logit = enc.binary_logit(params, s), g = 0.0;
    loss = kbalign::main_loss<double>({&logit, 1, 1}, c.labels, c.head, {&g, 1, 1});
    if (grads) enc.binary_backward(params, s, g, d_pooled, *grads);
  }
  if (grads) enc.backward(params, s, d_hidden, d_pooled, *grads);
  return loss;
}

struct Result {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t checked = 0;
};

// Checks up to `per_tensor` random entries of every parameter tensor
// (all of them when per_tensor == 0).
inline Result check_gradients(Case& c, std::mt19937_64& rng, std::size_t per_tensor, double h = 1e-5,
                              double floor = 1e-5) {
  kbalign::Encoder<double> enc(c.config);
  std::vector<double> analytic;
  evaluate(enc, c, c.params, &analytic);
  Result r;
  auto f = [&] { return evaluate(enc, c, c.params, nullptr); };
  for (const auto& t : enc.layout().tensors()) {
    std::vector<std::size_t> idx;
    if (per_tensor == 0 || t.size() <= per_tensor) {
      for (std::size_t i = 0; i < t.size(); ++i) idx.push_back(t.offset + i);
    } else {
      std::uniform_int_distribution<std::size_t> u(0, t.size() - 1);
      for (std::size_t k = 0; k < per_tensor; ++k) idx.push_back(t.offset + u(rng));
    }
    for (std::size_t i : idx) {
      const double numeric = oracle::central_difference(c.params, i, f, h);
      const double e = oracle::rel_error(analytic[i], numeric, floor);
      ++r.checked;
      if (e > r.max_rel_error) {
        r.max_rel_error = e;
        r.worst_tensor = t.name;
      }
    }
  }
  return r;
}

}  // namespace modelcheck
