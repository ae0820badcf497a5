#include "kbalign/matcher.hpp"

#include <omp.h>

namespace kbalign {

namespace {

void check_vocab(const TokenSequence& tokens, const KnowledgeIndex& index) {
  if (tokens.vocab_fingerprint != index.vocab_fingerprint()) {
    throw Error(ErrorKind::Fingerprint,
                "vocabulary fingerprint mismatch: tokens " + fingerprint_hex(tokens.vocab_fingerprint) +
                    ", index " + fingerprint_hex(index.vocab_fingerprint()));
  }
}

}  // namespace

std::vector<MatchSpan> find_knowledge_expressions(std::span<const TokenId> tokens,
                                                  const KnowledgeIndex& index) {
  std::vector<MatchSpan> spans;
  if (index.empty()) return spans;
  std::size_t pos = 0;
  while (pos < tokens.size()) {
    if (auto m = index.longest_match_at(tokens, pos)) {
      spans.push_back({pos, pos + m->length, m->entry});
      pos += m->length;
    } else {
      ++pos;
    }
  }
  return spans;
}

std::vector<MatchSpan> find_knowledge_expressions(const TokenSequence& tokens,
                                                  const KnowledgeIndex& index) {
  check_vocab(tokens, index);
  return find_knowledge_expressions(std::span<const TokenId>(tokens.ids), index);
}

namespace serial {

CorpusMatches match_corpus(std::span<const TokenSequence> corpus, const KnowledgeIndex& index) {
  CorpusMatches out(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    out[i] = find_knowledge_expressions(corpus[i], index);
  }
  return out;
}

}  // namespace serial

namespace parallel {

CorpusMatches match_corpus(std::span<const TokenSequence> corpus, const KnowledgeIndex& index) {
  for (const auto& s : corpus) check_vocab(s, index);
  CorpusMatches out(corpus.size());
  const auto n = static_cast<std::int64_t>(corpus.size());
#pragma omp parallel for schedule(dynamic, 64)
  for (std::int64_t i = 0; i < n; ++i) {
    out[static_cast<std::size_t>(i)] =
        find_knowledge_expressions(std::span<const TokenId>(corpus[static_cast<std::size_t>(i)].ids), index);
  }
  return out;
}

}  // namespace parallel

}  // namespace kbalign
