#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "kbalign/kb.hpp"
#include "kbalign/tokenizer.hpp"

namespace kbalign {

/// A knowledge-rich expression: tokens [start, end) matched to `entry`
/// of the index that produced it.
struct MatchSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  std::uint32_t entry = 0;

  std::size_t length() const noexcept { return end - start; }
  bool operator==(const MatchSpan&) const = default;
};

/// Greedy left-to-right longest match. After a match the scan resumes at
/// its end, so spans never overlap. Throws on a vocabulary mismatch
/// between the sequence and the index.
std::vector<MatchSpan> find_knowledge_expressions(const TokenSequence& tokens,
                                                  const KnowledgeIndex& index);

// Unchecked variant over raw ids.
std::vector<MatchSpan> find_knowledge_expressions(std::span<const TokenId> tokens,
                                                  const KnowledgeIndex& index);

using CorpusMatches = std::vector<std::vector<MatchSpan>>;

namespace serial {
CorpusMatches match_corpus(std::span<const TokenSequence> corpus, const KnowledgeIndex& index);
}  // namespace serial

namespace parallel {
CorpusMatches match_corpus(std::span<const TokenSequence> corpus, const KnowledgeIndex& index);
}  // namespace parallel

}  // namespace kbalign
