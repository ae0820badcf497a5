#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <set>
#include <tuple>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "kbalign/common.hpp"
#include "kbalign/tokenizer.hpp"

namespace kbalign {

/// One knowledge-base entity: its textual expression, the token key that
/// expression tokenizes to, and its knowledge embedding.
struct KnowledgeEntry {
  std::string label;    // raw label as read from the source file
  std::string surface;  // label with underscores turned into spaces
  std::vector<TokenId> key;
  std::vector<float> vector;
};

// Word2vec-style text: `label v1 ... v_dim` per line. A leading
// `<count> <dim>` header line (as shipped with Numberbatch) is skipped.
std::vector<KnowledgeEntry> parse_embeddings(std::istream& in, std::size_t dim);
std::vector<KnowledgeEntry> ingest_embeddings(const std::filesystem::path& path, std::size_t dim);
void write_embeddings(std::ostream& out, std::span<const KnowledgeEntry> entries);

std::unordered_set<std::string> load_word_list(const std::filesystem::path& path);

/// Drops entries whose whole surface is a stopword. With `keep_prefix`,
/// keeps only labels starting with it and strips the prefix first.
std::vector<KnowledgeEntry> filter_entries(std::vector<KnowledgeEntry> entries,
                                           const std::unordered_set<std::string>& stopwords,
                                           const std::optional<std::string>& keep_prefix = {});

struct Triple {
  std::string head;
  std::string relation;
  std::string tail;
};

/// Triples with interned entity and relation ids. Identical triples are
/// stored once.
class KnowledgeGraph {
 public:
  struct IdTriple {
    std::uint32_t head, relation, tail;
    bool operator==(const IdTriple&) const = default;
  };

  // Returns false when the triple was already present.
  bool add(const Triple& t);

  std::size_t size() const noexcept { return triples_.size(); }
  bool empty() const noexcept { return triples_.empty(); }
  const std::vector<IdTriple>& triples() const noexcept { return triples_; }
  const std::vector<std::string>& entities() const noexcept { return entities_; }
  const std::vector<std::string>& relations() const noexcept { return relations_; }

 private:
  std::uint32_t intern(std::vector<std::string>& names,
                       std::unordered_map<std::string, std::uint32_t>& ids,
                       const std::string& name);

  std::vector<std::string> entities_, relations_;
  std::unordered_map<std::string, std::uint32_t> entity_ids_, relation_ids_;
  std::vector<IdTriple> triples_;
  std::set<std::tuple<std::uint32_t, std::uint32_t, std::uint32_t>> seen_;
};

// `head<TAB>relation<TAB>tail` per line.
KnowledgeGraph parse_triples(std::istream& in);
KnowledgeGraph load_triples(const std::filesystem::path& path);

struct GraphEmbeddingOptions {
  std::size_t dim = 32;
  std::size_t epochs = 100;
  double margin = 1.0;
  double learning_rate = 0.01;
  std::uint64_t seed = 1;
};

struct GraphEmbedding {
  std::vector<KnowledgeEntry> entities;  // one per interned entity, in id order
  std::vector<std::vector<float>> relations;
  std::vector<double> epoch_losses;      // mean hinge loss per epoch
};

/// Translational margin-ranking embedding with one uniformly corrupted
/// head or tail per positive triple. Entity vectors are kept at unit norm.
GraphEmbedding embed_graph(const KnowledgeGraph& graph, const GraphEmbeddingOptions& options);

// max(0, margin + ||h + r - t|| - ||h' + r - t'||) for a given corruption.
double translational_hinge(std::span<const float> h, std::span<const float> r,
                           std::span<const float> t, std::span<const float> h_neg,
                           std::span<const float> t_neg, double margin);

/// Exact-lookup table over tokenized entity surfaces, plus the set of all
/// proper key prefixes so a longest-match scan can stop as soon as no
/// stored key continues the current window.
class KnowledgeIndex {
 public:
  struct BuildStats {
    std::size_t input_entries = 0;
    std::size_t dropped_unknown = 0;
    std::size_t collisions = 0;
  };

  struct Match {
    std::size_t length = 0;
    std::uint32_t entry = 0;
  };

  KnowledgeIndex() = default;

  static KnowledgeIndex build(std::span<const KnowledgeEntry> entries,
                              const SubwordVocabulary& vocab);

  /// Rebuilds from entries that already carry keys (e.g. after pruning).
  static KnowledgeIndex from_keyed(std::vector<KnowledgeEntry> entries, std::size_t dim,
                                   Fingerprint vocab_fingerprint,
                                   std::vector<TokenId> unmatchable);

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const std::vector<KnowledgeEntry>& entries() const noexcept { return entries_; }
  const KnowledgeEntry& entry(std::uint32_t i) const { return entries_.at(i); }
  const BuildStats& stats() const noexcept { return stats_; }
  Fingerprint vocab_fingerprint() const noexcept { return vocab_fingerprint_; }
  const std::vector<TokenId>& unmatchable() const noexcept { return unmatchable_; }
  std::size_t prefix_count() const noexcept { return prefixes_.size(); }

  // Content hash over keys and vectors.
  Fingerprint fingerprint() const noexcept { return fingerprint_; }

  std::optional<std::uint32_t> find(std::span<const TokenId> key) const;
  bool is_proper_prefix(std::span<const TokenId> key) const;
  bool is_unmatchable(TokenId id) const noexcept;

  /// Longest stored key equal to tokens[start, start + length).
  std::optional<Match> longest_match_at(std::span<const TokenId> tokens, std::size_t start) const;

  void save(const std::filesystem::path& path) const;
  static KnowledgeIndex load(const std::filesystem::path& path);
  void write(std::ostream& out) const;
  static KnowledgeIndex read(std::istream& in);

 private:
  void insert_keyed(KnowledgeEntry entry);
  void finalize();

  std::size_t dim_ = 0;
  std::vector<KnowledgeEntry> entries_;
  // Keys are the raw little-endian bytes of the token ids.
  std::unordered_map<std::string, std::uint32_t, StringHash, std::equal_to<>> exact_;
  std::unordered_set<std::string, StringHash, std::equal_to<>> prefixes_;
  std::vector<TokenId> unmatchable_;
  BuildStats stats_;
  Fingerprint vocab_fingerprint_ = 0;
  Fingerprint fingerprint_ = 0;
};

}  // namespace kbalign
