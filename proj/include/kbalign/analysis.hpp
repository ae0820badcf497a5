#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kbalign/kb.hpp"
#include "kbalign/kernels.hpp"
#include "kbalign/tokenizer.hpp"
#include "kbalign/trainer.hpp"

namespace kbalign {

enum class DistanceMetric { L2, Cosine };

std::string_view distance_metric_name(DistanceMetric m);
DistanceMetric parse_distance_metric(std::string_view name);

struct Neighbor {
  TokenId id = 0;
  std::string word;
  double distance = 0.0;
};

struct NeighborReport {
  std::string query;
  DistanceMetric metric = DistanceMetric::L2;
  std::vector<Neighbor> neighbors;  // ascending distance, ties by id
};

ConstMatrixView<float> word_embedding_table(const Checkpoint& ckpt);

TokenId lookup_word(const SubwordVocabulary& vocab, std::string_view word);

NeighborReport nearest_neighbors(ConstMatrixView<float> table, const SubwordVocabulary& vocab,
                                 std::string_view word, std::size_t k,
                                 DistanceMetric metric = DistanceMetric::L2);

struct AblationResult {
  KnowledgeIndex index;
  std::size_t removed = 0;
  std::vector<std::string> removed_surfaces;
};

// Drops every entry whose surface contains a keyword as a whole word.
AblationResult ablate_index(const KnowledgeIndex& index, std::span<const std::string> keywords);

bool contains_whole_word(std::string_view text, std::span<const std::string> words);

struct SynonymReport {
  std::size_t pairs = 0;
  std::size_t random_pairs = 0;
  double pair_mean = 0.0;
  double random_mean = 0.0;
  double ratio = 0.0;
};

// Control pairs are drawn uniformly from the words appearing in `pairs`.
SynonymReport synonym_distance_report(ConstMatrixView<float> table, const SubwordVocabulary& vocab,
                                      std::span<const std::pair<std::string, std::string>> pairs,
                                      std::size_t control, std::uint64_t seed);

std::vector<std::pair<std::string, std::string>> load_word_pairs(const std::filesystem::path& path);

struct ProbeOptions {
  std::size_t iterations = 400;
  double learning_rate = 0.5;
  double l2 = 1e-4;
  double test_fraction = 0.3;
};

struct ProbeResult {
  std::string task;
  std::size_t layer = 0;
  double accuracy = 0.0;
  std::size_t classes = 0;
  std::size_t train_count = 0;
  std::size_t test_count = 0;
};

ProbeResult probe(std::span<const std::vector<double>> representations, std::span<const std::size_t> labels,
                  std::size_t layer, std::uint64_t split_seed, const ProbeOptions& options = {},
                  std::string task = "probe");

struct ProbeDataset {
  std::string task;
  std::vector<std::string> sentences;
  std::vector<std::size_t> labels;
  std::vector<std::string> class_names;
};

// Quantile buckets over token counts.
ProbeDataset sentence_length_task(std::span<const std::string> sentences, const SubwordVocabulary& vocab,
                                  std::size_t buckets, std::size_t max_tokens);

// Sentences that contain exactly one of the target words; label = which.
ProbeDataset word_content_task(std::span<const std::string> sentences, std::span<const std::string> targets);

// [layer][example] mean-pooled text-layer outputs.
std::vector<std::vector<std::vector<double>>> layer_representations(const Checkpoint& ckpt,
                                                                   const SubwordVocabulary& vocab,
                                                                   std::span<const std::string> sentences);

struct ProbeSweep {
  std::vector<ProbeResult> layers;
  ProbeResult best;
};

ProbeSweep probe_layers(const Checkpoint& ckpt, const SubwordVocabulary& vocab, const ProbeDataset& data,
                        std::optional<std::vector<std::size_t>> layers, std::uint64_t seed,
                        const ProbeOptions& options = {}, bool shuffle_labels = false);

nlohmann::json to_json(const NeighborReport& r);
nlohmann::json to_json(const SynonymReport& r);
nlohmann::json to_json(const ProbeResult& r);
nlohmann::json to_json(const ProbeSweep& r);

}  // namespace kbalign
