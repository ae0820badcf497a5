#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "kbalign/kb.hpp"

namespace kbalign {

namespace {

void normalize(std::span<float> v) {
  double sq = 0.0;
  for (float x : v) sq += double(x) * x;
  const double n = std::sqrt(sq);
  if (n > 0.0) {
    for (float& x : v) x = static_cast<float>(x / n);
  }
}

// Writes h + r - t into diff and returns its norm.
double translation_residual(std::span<const float> h, std::span<const float> r,
                            std::span<const float> t, std::span<double> diff) {
  double sq = 0.0;
  for (std::size_t k = 0; k < h.size(); ++k) {
    diff[k] = double(h[k]) + r[k] - t[k];
    sq += diff[k] * diff[k];
  }
  return std::sqrt(sq);
}

}  // namespace

double translational_hinge(std::span<const float> h, std::span<const float> r,
                           std::span<const float> t, std::span<const float> h_neg,
                           std::span<const float> t_neg, double margin) {
  std::vector<double> scratch(h.size());
  const double pos = translation_residual(h, r, t, scratch);
  const double neg = translation_residual(h_neg, r, t_neg, scratch);
  return std::max(0.0, margin + pos - neg);
}

GraphEmbedding embed_graph(const KnowledgeGraph& graph, const GraphEmbeddingOptions& options) {
  if (graph.empty()) throw Error(ErrorKind::InvalidArgument, "cannot embed an empty graph");
  if (options.dim == 0) throw Error(ErrorKind::InvalidArgument, "embedding dimension must be positive");

  const std::size_t dim = options.dim;
  const std::size_t n_ent = graph.entities().size();
  const std::size_t n_rel = graph.relations().size();
  std::mt19937_64 rng(options.seed);
  const float bound = static_cast<float>(6.0 / std::sqrt(double(dim)));
  std::uniform_real_distribution<float> init(-bound, bound);

  std::vector<std::vector<float>> ent(n_ent, std::vector<float>(dim));
  std::vector<std::vector<float>> rel(n_rel, std::vector<float>(dim));
  for (auto& v : rel) {
    for (auto& x : v) x = init(rng);
    normalize(v);
  }
  for (auto& v : ent) {
    for (auto& x : v) x = init(rng);
    normalize(v);
  }

  GraphEmbedding result;
  std::vector<std::size_t> order(graph.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> g_pos(dim), g_neg(dim);
  std::uniform_int_distribution<std::size_t> pick_entity(0, n_ent - 1);
  std::bernoulli_distribution corrupt_head(0.5);
  const float lr = static_cast<float>(options.learning_rate);

  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t idx : order) {
      const auto& tr = graph.triples()[idx];
      std::uint32_t h_neg = tr.head, t_neg = tr.tail;
      const bool head_side = corrupt_head(rng);
      std::uint32_t& slot = head_side ? h_neg : t_neg;
      const std::uint32_t original = slot;
      if (n_ent > 1) {
        do {
          slot = static_cast<std::uint32_t>(pick_entity(rng));
        } while (slot == original);
      }

      const double d_pos = translation_residual(ent[tr.head], rel[tr.relation], ent[tr.tail], g_pos);
      const double d_neg = translation_residual(ent[h_neg], rel[tr.relation], ent[t_neg], g_neg);
      const double loss = options.margin + d_pos - d_neg;
      if (loss <= 0.0) continue;
      epoch_loss += loss;

      const double inv_pos = d_pos > 1e-12 ? 1.0 / d_pos : 0.0;
      const double inv_neg = d_neg > 1e-12 ? 1.0 / d_neg : 0.0;
      auto& h = ent[tr.head];
      auto& t = ent[tr.tail];
      auto& r = rel[tr.relation];
      auto& hn = ent[h_neg];
      auto& tn = ent[t_neg];
      for (std::size_t k = 0; k < dim; ++k) {
        const auto gp = static_cast<float>(g_pos[k] * inv_pos);
        const auto gn = static_cast<float>(g_neg[k] * inv_neg);
        h[k] -= lr * gp;
        t[k] += lr * gp;
        r[k] -= lr * (gp - gn);
        hn[k] += lr * gn;
        tn[k] -= lr * gn;
      }
      normalize(h);
      normalize(t);
      normalize(hn);
      normalize(tn);
    }
    result.epoch_losses.push_back(epoch_loss / double(graph.size()));
  }

  result.entities.reserve(n_ent);
  for (std::size_t i = 0; i < n_ent; ++i) {
    KnowledgeEntry e;
    e.label = graph.entities()[i];
    std::replace(e.label.begin(), e.label.end(), ' ', '_');
    e.surface = graph.entities()[i];
    std::replace(e.surface.begin(), e.surface.end(), '_', ' ');
    e.vector = std::move(ent[i]);
    result.entities.push_back(std::move(e));
  }
  result.relations = std::move(rel);
  return result;
}

}  // namespace kbalign
