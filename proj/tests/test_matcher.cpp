#include <doctest.h>

#include <random>

#include "kbalign/matcher.hpp"
#include "oracles.hpp"

using namespace kbalign;

namespace {

KnowledgeEntry entry(std::string surface) {
  KnowledgeEntry e;
  e.surface = e.label = std::move(surface);
  e.vector = {1.0f};
  return e;
}

SubwordVocabulary vocab() {
  return SubwordVocabulary::from_tokens({"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "is", "the", "man",
                                         "eating", "healthy", "food", "video", "game"});
}

}  // namespace

TEST_SUITE("matcher") {

TEST_CASE("healthy food") {
  auto v = vocab();
  auto index = KnowledgeIndex::build(std::vector{entry("healthy food"), entry("food")}, v);
  auto tokens = tokenize("is the man eating healthy food", v);
  auto spans = find_knowledge_expressions(tokens, index);
  REQUIRE(spans.size() == 1);
  CHECK(spans[0].start == 4);
  CHECK(spans[0].end == 6);
  CHECK(index.entry(spans[0].entry).surface == "healthy food");
  CHECK(spans == oracle::greedy_match(tokens.ids, index.entries()));
}

TEST_CASE("video game video") {
  auto v = vocab();
  auto index = KnowledgeIndex::build(std::vector{entry("video"), entry("video game")}, v);
  auto spans = find_knowledge_expressions(tokenize("video game video", v), index);
  REQUIRE(spans.size() == 2);
  CHECK(spans[0] == MatchSpan{0, 2, 1});
  CHECK(spans[1] == MatchSpan{2, 3, 0});
}

TEST_CASE("empty index or sentence") {
  auto v = vocab();
  auto index = KnowledgeIndex::build(std::vector{entry("food")}, v);
  CHECK(find_knowledge_expressions(tokenize("", v), index).empty());
  KnowledgeIndex empty;
  CHECK(find_knowledge_expressions(std::vector<TokenId>{10, 11}, empty).empty());
}

TEST_CASE("vocabulary mismatch") {
  auto v = vocab();
  auto other = SubwordVocabulary::from_tokens({"[PAD]", "[UNK]", "food"});
  auto index = KnowledgeIndex::build(std::vector{entry("food")}, v);
  CHECK_THROWS_AS(find_knowledge_expressions(tokenize("food", other), index), Error);
}

TEST_CASE("structural tokens never match") {
  auto v = vocab();
  KnowledgeEntry e;
  e.surface = "mask food";
  e.key = {*v.mask_id(), *v.find("food")};
  e.vector = {1.0f};
  KnowledgeEntry f = entry("food");
  f.key = {*v.find("food")};
  auto index = KnowledgeIndex::from_keyed({e, f}, 1, v.fingerprint(), v.structural_ids());
  std::vector<TokenId> tokens{*v.mask_id(), *v.find("food")};
  auto spans = find_knowledge_expressions(tokens, index);
  REQUIRE(spans.size() == 1);
  CHECK(spans[0] == MatchSpan{1, 2, 1});
}

TEST_CASE("random instances: oracle, non-overlap, soundness, maximality") {
  std::mt19937_64 rng(29);
  for (int trial = 0; trial < 1000; ++trial) {
    auto inst = oracle::random_match_instance(rng);
    auto spans = find_knowledge_expressions(inst.sentence, inst.index);
    CHECK(spans == oracle::greedy_match(inst.sentence, inst.index.entries()));
    for (std::size_t i = 0; i < spans.size(); ++i) {
      const auto& s = spans[i];
      CHECK(s.start < s.end);
      CHECK(s.end <= inst.sentence.size());
      CHECK(s.length() == inst.index.entry(s.entry).key.size());
      std::vector<TokenId> slice(inst.sentence.begin() + long(s.start), inst.sentence.begin() + long(s.end));
      CHECK(inst.index.find(slice) == s.entry);
      if (i > 0) CHECK(spans[i - 1].end <= s.start);
      for (std::size_t end = s.end + 1; end <= inst.sentence.size(); ++end) {
        std::vector<TokenId> longer(inst.sentence.begin() + long(s.start), inst.sentence.begin() + long(end));
        CHECK_FALSE(inst.index.find(longer).has_value());
      }
    }
  }
}

TEST_CASE("serial and parallel corpus matching agree") {
  auto v = vocab();
  auto index = KnowledgeIndex::build(std::vector{entry("video"), entry("video game"), entry("healthy food")}, v);
  std::vector<TokenSequence> corpus;
  const std::vector<std::string> lines{"video game", "the man is eating healthy food", "", "game video video game"};
  for (int rep = 0; rep < 50; ++rep) {
    for (const auto& l : lines) corpus.push_back(tokenize(l, v));
  }
  CHECK(serial::match_corpus(corpus, index) == parallel::match_corpus(corpus, index));
}

}
