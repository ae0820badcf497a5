#include "kbalign/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

#include "kbalign/model.hpp"

namespace kbalign {

using nlohmann::json;

std::string_view distance_metric_name(DistanceMetric m) {
  return m == DistanceMetric::L2 ? "l2" : "cosine";
}

DistanceMetric parse_distance_metric(std::string_view name) {
  if (name == "l2" || name == "L2") return DistanceMetric::L2;
  if (name == "cosine") return DistanceMetric::Cosine;
  throw Error(ErrorKind::InvalidArgument, "unknown distance metric '" + std::string(name) + "'");
}

ConstMatrixView<float> word_embedding_table(const Checkpoint& ckpt) {
  const Encoder<float> enc(ckpt.model);
  return {ckpt.params.data() + enc.word_embedding_offset(), ckpt.model.vocab_size, ckpt.model.d_e};
}

TokenId lookup_word(const SubwordVocabulary& vocab, std::string_view word) {
  if (auto id = vocab.find(word)) return *id;
  if (auto id = vocab.find(normalize_text(word))) return *id;
  throw Error(ErrorKind::InvalidArgument, "'" + std::string(word) + "' is not in the vocabulary");
}

NeighborReport nearest_neighbors(ConstMatrixView<float> table, const SubwordVocabulary& vocab,
                                 std::string_view word, std::size_t k, DistanceMetric metric) {
  if (table.rows != vocab.size()) {
    throw Error(ErrorKind::InvalidArgument, "embedding table has " + std::to_string(table.rows) +
                                                " rows for a vocabulary of " + std::to_string(vocab.size()));
  }
  const TokenId q = lookup_word(vocab, word);
  const std::span<const float> query(table.row(static_cast<std::size_t>(q)), table.cols);
  std::vector<float> dist(table.rows);
  if (metric == DistanceMetric::L2) {
    kernels::parallel::squared_distances<float>(table, query, dist);
  } else {
    kernels::parallel::cosine_distances<float>(table, query, dist);
  }
  std::vector<TokenId> ids;
  ids.reserve(table.rows);
  for (std::size_t i = 0; i < table.rows; ++i) {
    if (static_cast<TokenId>(i) != q) ids.push_back(static_cast<TokenId>(i));
  }
  const std::size_t take = std::min(k, ids.size());
  auto less = [&](TokenId a, TokenId b) {
    const float da = dist[static_cast<std::size_t>(a)], db = dist[static_cast<std::size_t>(b)];
    return da < db || (da == db && a < b);
  };
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(take), ids.end(), less);

  NeighborReport r;
  r.query = vocab.token(q);
  r.metric = metric;
  for (std::size_t i = 0; i < take; ++i) {
    const double d = dist[static_cast<std::size_t>(ids[i])];
    r.neighbors.push_back({ids[i], vocab.token(ids[i]), metric == DistanceMetric::L2 ? std::sqrt(d) : d});
  }
  return r;
}

namespace {

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

}  // namespace

bool contains_whole_word(std::string_view text, std::span<const std::string> words) {
  std::unordered_set<std::string> wanted;
  for (const auto& w : words) {
    for (auto& piece : split_words(normalize_text(w))) wanted.insert(std::move(piece));
  }
  for (const auto& w : split_words(normalize_text(text))) {
    if (wanted.contains(w)) return true;
  }
  return false;
}

AblationResult ablate_index(const KnowledgeIndex& index, std::span<const std::string> keywords) {
  if (keywords.empty()) throw Error(ErrorKind::InvalidArgument, "ablation needs at least one keyword");
  std::unordered_set<std::string> wanted;
  for (const auto& k : keywords) {
    for (auto& piece : split_words(normalize_text(k))) wanted.insert(std::move(piece));
  }
  AblationResult r;
  std::vector<KnowledgeEntry> kept;
  kept.reserve(index.size());
  for (const auto& e : index.entries()) {
    bool hit = false;
    for (const auto& w : split_words(normalize_text(e.surface))) {
      if (wanted.contains(w)) {
        hit = true;
        break;
      }
    }
    if (hit) {
      r.removed_surfaces.push_back(e.surface);
    } else {
      kept.push_back(e);
    }
  }
  r.removed = r.removed_surfaces.size();
  r.index = KnowledgeIndex::from_keyed(std::move(kept), index.dim(), index.vocab_fingerprint(), index.unmatchable());
  return r;
}

SynonymReport synonym_distance_report(ConstMatrixView<float> table, const SubwordVocabulary& vocab,
                                      std::span<const std::pair<std::string, std::string>> pairs,
                                      std::size_t control, std::uint64_t seed) {
  auto distance = [&](TokenId a, TokenId b) {
    const float* x = table.row(static_cast<std::size_t>(a));
    const float* y = table.row(static_cast<std::size_t>(b));
    double s = 0.0;
    for (std::size_t j = 0; j < table.cols; ++j) {
      const double d = double(x[j]) - double(y[j]);
      s += d * d;
    }
    return std::sqrt(s);
  };
  SynonymReport r;
  std::set<TokenId> pool;
  double sum = 0.0;
  for (const auto& [a, b] : pairs) {
    const TokenId ia = lookup_word(vocab, a), ib = lookup_word(vocab, b);
    sum += distance(ia, ib);
    pool.insert(ia);
    pool.insert(ib);
  }
  r.pairs = pairs.size();
  r.pair_mean = pairs.empty() ? 0.0 : sum / double(pairs.size());
  if (control > 0) {
    if (pool.size() < 2) throw Error(ErrorKind::InvalidArgument, "random control needs at least two distinct words");
    const std::vector<TokenId> words(pool.begin(), pool.end());
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, words.size() - 1);
    double rsum = 0.0;
    for (std::size_t i = 0; i < control; ++i) {
      const std::size_t a = pick(rng);
      std::size_t b = pick(rng);
      while (b == a) b = pick(rng);
      rsum += distance(words[a], words[b]);
    }
    r.random_pairs = control;
    r.random_mean = rsum / double(control);
  }
  if (r.random_mean > 0.0) {
    r.ratio = r.pair_mean / r.random_mean;
  } else if (r.pair_mean == 0.0) {
    r.ratio = 0.0;
  } else {
    throw Error(ErrorKind::Numeric, "random pair mean distance is zero");
  }
  return r;
}

std::vector<std::pair<std::string, std::string>> load_word_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto words = split_words(line);
    if (words.empty()) continue;
    if (words.size() != 2) {
      throw Error(ErrorKind::Parse, path.string() + ":" + std::to_string(line_no) + ": expected two words");
    }
    out.emplace_back(words[0], words[1]);
  }
  return out;
}

ProbeResult probe(std::span<const std::vector<double>> reps, std::span<const std::size_t> labels,
                  std::size_t layer, std::uint64_t split_seed, const ProbeOptions& options, std::string task) {
  if (reps.size() != labels.size()) {
    throw Error(ErrorKind::InvalidArgument, "representations and labels differ in length");
  }
  const std::set<std::size_t> distinct(labels.begin(), labels.end());
  if (distinct.size() < 2) throw Error(ErrorKind::InvalidArgument, "probing needs at least two classes");
  const std::size_t n = reps.size();
  const std::size_t dim = reps.front().size();
  for (const auto& r : reps) {
    if (r.size() != dim) throw Error(ErrorKind::InvalidArgument, "representations differ in dimension");
  }
  const std::size_t C = *distinct.rbegin() + 1;

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(split_seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::size_t n_test = static_cast<std::size_t>(std::llround(options.test_fraction * double(n)));
  n_test = std::clamp<std::size_t>(n_test, 1, n - 1);
  const std::span<const std::size_t> test(perm.data(), n_test);
  const std::span<const std::size_t> train(perm.data() + n_test, n - n_test);

  // Standardize with training statistics.
  std::vector<double> mean(dim, 0.0), scale(dim, 0.0);
  for (std::size_t i : train) {
    for (std::size_t j = 0; j < dim; ++j) mean[j] += reps[i][j];
  }
  for (auto& m : mean) m /= double(train.size());
  for (std::size_t i : train) {
    for (std::size_t j = 0; j < dim; ++j) scale[j] += (reps[i][j] - mean[j]) * (reps[i][j] - mean[j]);
  }
  for (auto& s : scale) {
    s = std::sqrt(s / double(train.size()));
    s = s > 1e-12 ? 1.0 / s : 0.0;
  }
  auto feature = [&](std::size_t i, std::size_t j) { return (reps[i][j] - mean[j]) * scale[j]; };

  std::vector<double> W(C * dim, 0.0), b(C, 0.0), gW(C * dim), gb(C), logits(C), x(dim);
  auto scores = [&](std::size_t i) {
    for (std::size_t j = 0; j < dim; ++j) x[j] = feature(i, j);
    for (std::size_t c = 0; c < C; ++c) logits[c] = b[c] + kernels::dot(W.data() + c * dim, x.data(), dim);
  };
  const double inv = 1.0 / double(train.size());
  for (std::size_t it = 0; it < options.iterations; ++it) {
    std::fill(gW.begin(), gW.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t i : train) {
      scores(i);
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (auto& l : logits) z += (l = std::exp(l - mx));
      for (std::size_t c = 0; c < C; ++c) {
        const double g = (logits[c] / z - (c == labels[i] ? 1.0 : 0.0)) * inv;
        gb[c] += g;
        kernels::axpy(g, x.data(), gW.data() + c * dim, dim);
      }
    }
    for (std::size_t k = 0; k < W.size(); ++k) W[k] -= options.learning_rate * (gW[k] + options.l2 * W[k]);
    for (std::size_t c = 0; c < C; ++c) b[c] -= options.learning_rate * gb[c];
  }

  std::size_t correct = 0;
  for (std::size_t i : test) {
    scores(i);
    const auto pred = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    if (pred == labels[i]) ++correct;
  }
  ProbeResult r;
  r.task = std::move(task);
  r.layer = layer;
  r.accuracy = double(correct) / double(test.size());
  r.classes = distinct.size();
  r.train_count = train.size();
  r.test_count = test.size();
  return r;
}

ProbeDataset sentence_length_task(std::span<const std::string> sentences, const SubwordVocabulary& vocab,
                                  std::size_t buckets, std::size_t max_tokens) {
  if (buckets < 2) throw Error(ErrorKind::InvalidArgument, "sentence length task needs at least two buckets");
  ProbeDataset d;
  d.task = "sentlen";
  std::vector<std::size_t> lengths;
  for (const auto& s : sentences) lengths.push_back(tokenize(s, vocab, max_tokens).size());
  std::vector<std::size_t> sorted = lengths;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> bounds;  // bucket i holds lengths < bounds[i]
  for (std::size_t i = 1; i < buckets; ++i) {
    const std::size_t v = sorted.empty() ? 0 : sorted[i * sorted.size() / buckets];
    if (bounds.empty() || v > bounds.back()) bounds.push_back(v);
  }
  for (std::size_t i = 0; i <= bounds.size(); ++i) {
    const std::string lo = i == 0 ? "0" : std::to_string(bounds[i - 1]);
    d.class_names.push_back(i == bounds.size() ? ">=" + lo : lo + "-" + std::to_string(bounds[i] - 1));
  }
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    d.sentences.push_back(sentences[i]);
    d.labels.push_back(static_cast<std::size_t>(std::upper_bound(bounds.begin(), bounds.end(), lengths[i]) - bounds.begin()));
  }
  return d;
}

ProbeDataset word_content_task(std::span<const std::string> sentences, std::span<const std::string> targets) {
  ProbeDataset d;
  d.task = "wc";
  std::vector<std::string> norm;
  for (const auto& t : targets) {
    norm.push_back(normalize_text(t));
    d.class_names.push_back(norm.back());
  }
  for (const auto& s : sentences) {
    const auto words = split_words(normalize_text(s));
    std::optional<std::size_t> label;
    bool ambiguous = false;
    for (std::size_t t = 0; t < norm.size(); ++t) {
      if (std::find(words.begin(), words.end(), norm[t]) == words.end()) continue;
      if (label) ambiguous = true;
      label = t;
    }
    if (label && !ambiguous) {
      d.sentences.push_back(s);
      d.labels.push_back(*label);
    }
  }
  return d;
}

std::vector<std::vector<std::vector<double>>> layer_representations(const Checkpoint& ckpt,
                                                                   const SubwordVocabulary& vocab,
                                                                   std::span<const std::string> sentences) {
  if (ckpt.vocab_fingerprint != vocab.fingerprint()) {
    throw Error(ErrorKind::Fingerprint, "checkpoint vocabulary " + fingerprint_hex(ckpt.vocab_fingerprint) +
                                            " does not match " + fingerprint_hex(vocab.fingerprint()));
  }
  const Encoder<float> enc(ckpt.model);
  const std::size_t L = ckpt.model.text_layers;
  const std::size_t reserved = (vocab.cls_id() ? 1 : 0) + (vocab.sep_id() ? 1 : 0);
  const std::size_t budget = ckpt.model.max_text_len - reserved;
  std::vector<std::vector<std::vector<double>>> out(L, std::vector<std::vector<double>>(sentences.size()));
  const auto n = static_cast<std::int64_t>(sentences.size());
#pragma omp parallel
  {
    ForwardState<float> state;
#pragma omp for schedule(static)
    for (std::int64_t ii = 0; ii < n; ++ii) {
      const auto i = static_cast<std::size_t>(ii);
      std::vector<TokenId> ids;
      if (vocab.cls_id()) ids.push_back(*vocab.cls_id());
      const auto seq = tokenize(sentences[i], vocab, budget);
      ids.insert(ids.end(), seq.ids.begin(), seq.ids.end());
      if (vocab.sep_id()) ids.push_back(*vocab.sep_id());
      ExampleInput<float> in;
      in.ids = ids;
      enc.forward(ckpt.params, in, vocab.pad_id(), state);
      for (std::size_t l = 0; l < L; ++l) {
        const auto pooled = enc.pooled_layer_representation(state, l);
        out[l][i].assign(pooled.begin(), pooled.end());
      }
    }
  }
  return out;
}

ProbeSweep probe_layers(const Checkpoint& ckpt, const SubwordVocabulary& vocab, const ProbeDataset& data,
                        std::optional<std::vector<std::size_t>> layers, std::uint64_t seed,
                        const ProbeOptions& options, bool shuffle_labels) {
  const std::size_t L = ckpt.model.text_layers;
  std::vector<std::size_t> which;
  if (layers) {
    which = *layers;
  } else {
    which.resize(L);
    std::iota(which.begin(), which.end(), 0);
  }
  for (std::size_t l : which) {
    if (l >= L) {
      throw Error(ErrorKind::InvalidArgument, "layer " + std::to_string(l) + " out of range (" +
                                                  std::to_string(L) + " text layers)");
    }
  }
  if (which.empty()) throw Error(ErrorKind::InvalidArgument, "no layers to probe");
  std::vector<std::size_t> labels = data.labels;
  if (shuffle_labels) {
    std::mt19937_64 rng(derive_seed(seed, {0x73687566ULL}));
    std::shuffle(labels.begin(), labels.end(), rng);
  }
  const auto reps = layer_representations(ckpt, vocab, data.sentences);
  ProbeSweep sweep;
  for (std::size_t l : which) {
    sweep.layers.push_back(probe(reps[l], labels, l, seed, options, data.task));
    if (sweep.layers.size() == 1 || sweep.layers.back().accuracy > sweep.best.accuracy) {
      sweep.best = sweep.layers.back();
    }
  }
  return sweep;
}

json to_json(const NeighborReport& r) {
  json n = json::array();
  for (const auto& x : r.neighbors) n.push_back({{"id", x.id}, {"word", x.word}, {"distance", x.distance}});
  return {{"query", r.query}, {"metric", distance_metric_name(r.metric)}, {"neighbors", std::move(n)}};
}

json to_json(const SynonymReport& r) {
  return {{"pairs", r.pairs},         {"random_pairs", r.random_pairs}, {"pair_mean", r.pair_mean},
          {"random_mean", r.random_mean}, {"ratio", r.ratio}};
}

json to_json(const ProbeResult& r) {
  return {{"task", r.task},       {"layer", r.layer},          {"accuracy", r.accuracy},
          {"classes", r.classes}, {"train", r.train_count}, {"test", r.test_count}};
}

json to_json(const ProbeSweep& s) {
  json layers = json::array();
  for (const auto& l : s.layers) layers.push_back(to_json(l));
  return {{"layers", std::move(layers)}, {"best", to_json(s.best)}};
}

}  // namespace kbalign
