#pragma once

// Synthetic entity/attribute world: a KB of (entity, has_color, color)
// relations, an attribute-free mention corpus, and a QA task whose answers
// are fixed by the KB. Test entities never appear in task training text.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "kbalign/kb.hpp"
#include "kbalign/trainer.hpp"

namespace kbalign {

struct ToyWorldOptions {
  std::size_t entities = 200;
  std::vector<std::string> domains = {"food", "tool", "animal", "plant"};
  std::vector<std::string> attributes = {"red", "blue", "green", "yellow", "white"};
  double train_fraction = 0.6;
  std::size_t mentions_per_entity = 4;
  std::size_t probe_targets = 20;
  std::size_t probe_sentences_per_target = 20;
  std::uint64_t seed = 7;
};

struct ToyEntity {
  std::string domain;
  std::string name;
  std::string attribute;
  bool train = false;

  std::string surface() const { return domain + " " + name; }
};

struct ToyWorld {
  std::vector<ToyEntity> entities;
  std::vector<std::string> vocab_tokens;
  KnowledgeGraph graph;
  std::vector<std::string> corpus;
  std::vector<TaskExample> train;
  std::vector<TaskExample> test;
  std::vector<std::pair<std::string, std::string>> synonym_pairs;
  std::vector<std::string> probe_targets;
  std::vector<std::string> probe_sentences;
};

ToyWorld make_toy_world(const ToyWorldOptions& options = {});

// vocab.txt, triples.tsv, corpus.txt, task_train.jsonl, task_test.jsonl,
// pairs.txt, probe_targets.txt, probe_sentences.txt, keywords.txt
void write_toy_world(const ToyWorld& world, const std::filesystem::path& dir,
                     const std::string& ablation_domain);

// Soft fit: keeps entities distinct while clustering them by attribute.
GraphEmbeddingOptions toy_graph_options();

// Small text-only model and schedule sized for the toy world.
TrainConfig toy_train_config(std::size_t vocab_size, std::size_t d_v);

}  // namespace kbalign
