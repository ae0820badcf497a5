#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kbalign/align.hpp"
#include "kbalign/kb.hpp"
#include "kbalign/matcher.hpp"
#include "kbalign/model.hpp"
#include "kbalign/optim.hpp"
#include "kbalign/tokenizer.hpp"

namespace kbalign {

enum class Strategy { Baseline, PT, FT, PT_FT };

std::string_view strategy_name(Strategy s);
Strategy parse_strategy(std::string_view name);
bool aligns_in_pretraining(Strategy s) noexcept;
bool aligns_in_finetuning(Strategy s) noexcept;

struct TrainConfig {
  Strategy strategy = Strategy::Baseline;
  double lambda = 0.0;
  std::optional<double> pretrain_lambda;  // per-phase overrides, no default
  std::optional<double> finetune_lambda;
  AlignmentVariant variant = AlignmentVariant::SquaredL2;
  std::uint64_t seed = 1;
  std::size_t batch_size = 32;
  double learning_rate = 5e-5;
  std::optional<double> finetune_learning_rate;
  std::size_t pretrain_epochs = 0;
  std::size_t finetune_epochs = 0;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double mask_probability = 0.15;
  double heldout_fraction = 0.1;
  ModelConfig model;

  void validate() const;
  double phase_lambda(bool pretraining) const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);

  Fingerprint fingerprint() const;
  // Everything except the compared axes (seed, strategy, lambda values).
  Fingerprint experiment_fingerprint() const;
};

/// Tokenized text corpus for the masked-token objective.
struct Corpus {
  std::vector<TokenSequence> sentences;
  Fingerprint fingerprint = 0;
};

Corpus tokenize_corpus(std::span<const std::string> lines, const SubwordVocabulary& vocab,
                       std::size_t max_tokens);
std::vector<std::string> read_lines(const std::filesystem::path& path);

struct TaskExample {
  std::string text;
  std::string answer;
  std::vector<std::string> tags;
  std::vector<float> visual;  // visual_rows x visual_dim
  std::size_t visual_rows = 0;
};

/// Question answering data: K-way classification over `answers`, or a
/// binary task whose answers are {false, true}.
struct TaskData {
  HeadKind head = HeadKind::Classification;
  std::vector<std::string> answers;
  std::vector<TaskExample> train;
  std::vector<TaskExample> test;

  std::size_t label_of(const std::string& answer) const;
  Fingerprint fingerprint() const;
};

std::vector<TaskExample> load_task_examples(const std::filesystem::path& jsonl);
void write_task_examples(std::ostream& out, std::span<const TaskExample> examples);
TaskData make_task_data(std::vector<TaskExample> train, std::vector<TaskExample> test,
                        HeadKind head = HeadKind::Classification);

/// Matching is deterministic, so each (sentences, index) pair is matched
/// once and reused.
class MatchCache {
 public:
  const CorpusMatches& get(std::span<const TokenSequence> sentences, Fingerprint sentences_fp,
                           const KnowledgeIndex& index);
  std::size_t hits() const noexcept { return hits_; }
  std::size_t misses() const noexcept { return misses_; }

 private:
  std::map<std::pair<Fingerprint, Fingerprint>, CorpusMatches> cache_;
  std::size_t hits_ = 0, misses_ = 0;
};

struct Checkpoint {
  ModelConfig model;
  std::vector<float> params;
  Projection<float> projection;
  Optimizer model_optimizer;
  Optimizer projection_optimizer;
  Fingerprint model_fingerprint = 0;
  Fingerprint vocab_fingerprint = 0;
  Fingerprint kb_fingerprint = 0;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

Checkpoint initial_checkpoint(const TrainConfig& config, const SubwordVocabulary& vocab,
                              const KnowledgeIndex& index);

// Throws ErrorKind::Fingerprint unless the checkpoint was produced for this
// model configuration, vocabulary and knowledge index.
void check_compatible(const Checkpoint& ckpt, const TrainConfig& config,
                      const SubwordVocabulary& vocab, const KnowledgeIndex& index);

struct EpochStats {
  double main_loss = 0.0;
  double align_loss = 0.0;  // summed over matches, averaged over batches
  double total_loss = 0.0;
  std::size_t matches = 0;
  std::optional<double> heldout_main;
  std::optional<double> heldout_align;  // mean per held-out match
  std::optional<double> accuracy;
};

struct PhaseReport {
  std::string phase;
  bool alignment = false;
  double lambda = 0.0;
  std::size_t steps = 0;
  std::size_t projection_steps = 0;
  std::vector<EpochStats> epochs;
};

struct TagMetrics {
  double accuracy = 0.0;
  std::size_t count = 0;
};

struct Metrics {
  double accuracy = 0.0;
  std::size_t count = 0;
  std::map<std::string, TagMetrics> by_tag;
};

struct PretrainResult {
  Checkpoint checkpoint;
  PhaseReport report;
};

struct FinetuneResult {
  Checkpoint checkpoint;
  PhaseReport report;
  Metrics metrics;
};

PretrainResult pretrain(const Corpus& corpus, const KnowledgeIndex& index,
                        const SubwordVocabulary& vocab, const TrainConfig& config,
                        Checkpoint start, MatchCache* cache = nullptr);

FinetuneResult finetune(const TaskData& task, Checkpoint start, const KnowledgeIndex& index,
                        const SubwordVocabulary& vocab, const TrainConfig& config,
                        MatchCache* cache = nullptr);

Metrics evaluate(const TaskData& task, const Checkpoint& ckpt, const SubwordVocabulary& vocab);

struct RunResult {
  Checkpoint checkpoint;
  std::vector<PhaseReport> phases;
  Metrics metrics;
  nlohmann::json report;
};

/// Pretraining then fine-tuning, with alignment switched on per strategy.
RunResult run_strategy(const TrainConfig& config, const Corpus& corpus, const TaskData& task,
                       const KnowledgeIndex& index, const SubwordVocabulary& vocab,
                       MatchCache* cache = nullptr);

nlohmann::json to_json(const PhaseReport& r);
nlohmann::json to_json(const Metrics& m);

}  // namespace kbalign
