#include <doctest.h>

#include <random>
#include <set>

#include "kbalign/tokenizer.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace kbalign;

namespace {

SubwordVocabulary small_vocab() {
  return SubwordVocabulary::from_tokens({"[PAD]", "[UNK]", "hello", "##s", "hell", "##o", "world"});
}

std::vector<std::string> pieces(const TokenSequence& seq, const SubwordVocabulary& v) {
  std::vector<std::string> out;
  for (auto id : seq.ids) out.push_back(v.token(id));
  return out;
}

}  // namespace

TEST_SUITE("tokenizer") {

TEST_CASE("vocabulary ids follow line order") {
  testutil::TempDir dir;
  auto path = testutil::write_file(dir / "vocab.txt", "[PAD]\n[UNK]\nhello\n##s\n");
  auto v = SubwordVocabulary::load(path);
  CHECK(v.size() == 4);
  CHECK(v.find("hello") == 2);
  CHECK(v.token(3) == "##s");
  CHECK(v.pad_id() == 0);
  CHECK(v.unk_id() == 1);
  CHECK_FALSE(v.cls_id().has_value());
  for (TokenId id = 0; id < 4; ++id) CHECK(v.find(v.token(id)) == id);
}

TEST_CASE("empty vocabulary file is rejected") {
  testutil::TempDir dir;
  auto path = testutil::write_file(dir / "vocab.txt", "");
  try {
    SubwordVocabulary::load(path);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Parse);
    CHECK(std::string(e.what()).find("missing required special tokens") != std::string::npos);
  }
}

TEST_CASE("duplicate token is rejected") {
  testutil::TempDir dir;
  auto path = testutil::write_file(dir / "vocab.txt", "[PAD]\n[UNK]\nhello\nhello\n");
  try {
    SubwordVocabulary::load(path);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Parse);
    CHECK(std::string(e.what()).find("duplicate") != std::string::npos);
  }
}

TEST_CASE("missing vocabulary file") {
  CHECK_THROWS_AS(SubwordVocabulary::load("/nonexistent/vocab.txt"), Error);
}

TEST_CASE("greedy longest prefix") {
  auto v = small_vocab();
  auto seq = tokenize("hellos", v);
  CHECK(pieces(seq, v) == std::vector<std::string>{"hello", "##s"});
  CHECK(detokenize(seq, v) == "hellos");
  // "hell" + "##o" is also a segmentation but "hello" is longer.
  CHECK(pieces(tokenize("hello", v), v) == std::vector<std::string>{"hello"});
}

TEST_CASE("empty and whitespace input") {
  auto v = small_vocab();
  CHECK(tokenize("", v).empty());
  CHECK(tokenize("  \t\n ", v).empty());
}

TEST_CASE("unknown words and long words") {
  auto v = small_vocab();
  auto seq = tokenize("hello xyz", v);
  REQUIRE(seq.size() == 2);
  CHECK(seq.ids[1] == v.unk_id());
  CHECK(detokenize(std::vector<TokenId>{v.unk_id()}, v) == "[UNK]");

  auto vb = SubwordVocabulary::from_tokens({"[PAD]", "[UNK]", "a", "##a"});
  CHECK(tokenize(std::string(100, 'a'), vb).size() == 20);
  CHECK(tokenize_unbounded(std::string(100, 'a'), vb).size() == 100);
  auto too_long = tokenize(std::string(101, 'a'), vb);
  REQUIRE(too_long.size() == 1);
  CHECK(too_long.ids[0] == vb.unk_id());
}

TEST_CASE("lowercase and NFC normalization") {
  auto v = SubwordVocabulary::from_tokens({"[PAD]", "[UNK]", "caf\xC3\xA9", "hello"});
  // Decomposed e + combining acute, upper case.
  auto seq = tokenize("CAFE\xCC\x81 Hello", v);
  CHECK(pieces(seq, v) == std::vector<std::string>{"caf\xC3\xA9", "hello"});
}

TEST_CASE("truncation keeps the earliest tokens") {
  auto v = small_vocab();
  auto seq = tokenize("hellos world hellos", v, 3);
  CHECK(pieces(seq, v) == std::vector<std::string>{"hello", "##s", "world"});
  CHECK(tokenize("hello world", v, 0).empty());
}

TEST_CASE("offsets are monotone and non-overlapping") {
  auto v = small_vocab();
  auto seq = tokenize("hellos  world xyz hells", v);
  REQUIRE(seq.offsets.size() == seq.ids.size());
  for (std::size_t i = 0; i < seq.offsets.size(); ++i) {
    CHECK(seq.offsets[i].begin < seq.offsets[i].end);
    CHECK(seq.offsets[i].end <= seq.surface.size());
    if (i > 0) CHECK(seq.offsets[i - 1].end <= seq.offsets[i].begin);
  }
  CHECK(seq.surface.substr(seq.offsets[1].begin, seq.offsets[1].end - seq.offsets[1].begin) == "s");
}

TEST_CASE("out of range id") {
  auto v = small_vocab();
  CHECK_THROWS_AS(detokenize(std::vector<TokenId>{99}, v), Error);
  CHECK_THROWS_AS(detokenize(std::vector<TokenId>{-1}, v), Error);
}

TEST_CASE("random words match the brute-force segmenter") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> letter(0, 4);
  std::uniform_int_distribution<std::size_t> len(1, 6);
  for (int trial = 0; trial < 200; ++trial) {
    std::set<std::string> pieces_set;
    const std::size_t n_pieces = std::uniform_int_distribution<std::size_t>(1, 25)(rng);
    for (std::size_t i = 0; i < n_pieces; ++i) {
      std::string p;
      const std::size_t l = std::uniform_int_distribution<std::size_t>(1, 3)(rng);
      for (std::size_t k = 0; k < l; ++k) p += char('a' + letter(rng));
      pieces_set.insert(std::bernoulli_distribution(0.5)(rng) ? "##" + p : p);
    }
    std::vector<std::string> tokens{"[PAD]", "[UNK]"};
    tokens.insert(tokens.end(), pieces_set.begin(), pieces_set.end());
    auto v = SubwordVocabulary::from_tokens(tokens);
    for (int w = 0; w < 20; ++w) {
      std::string word;
      const std::size_t l = len(rng);
      for (std::size_t k = 0; k < l; ++k) word += char('a' + letter(rng));
      auto expected = oracle::segment(word, tokens);
      auto got = segment_word(word, v);
      if (!expected) {
        CHECK(got == std::vector<TokenId>{v.unk_id()});
      } else {
        std::vector<std::string> got_pieces;
        for (auto id : got) got_pieces.push_back(v.token(id));
        CHECK(got_pieces == *expected);
      }
    }
  }
}

TEST_CASE("round trip on covered words") {
  std::mt19937_64 rng(5);
  std::vector<std::string> tokens{"[PAD]", "[UNK]"};
  for (char c = 'a'; c <= 'z'; ++c) {
    tokens.push_back(std::string(1, c));
    tokens.push_back("##" + std::string(1, c));
  }
  for (const char* w : {"king", "queen", "##ing", "##ed", "food", "health"}) tokens.push_back(w);
  auto v = SubwordVocabulary::from_tokens(tokens);
  std::uniform_int_distribution<int> letter(0, 25);
  for (int trial = 0; trial < 500; ++trial) {
    std::string sentence;
    const int words = std::uniform_int_distribution<int>(1, 4)(rng);
    for (int w = 0; w < words; ++w) {
      if (w) sentence += ' ';
      const int l = std::uniform_int_distribution<int>(1, 8)(rng);
      for (int k = 0; k < l; ++k) sentence += char('a' + letter(rng));
    }
    auto seq = tokenize_unbounded(sentence, v);
    CHECK(detokenize(seq, v) == sentence);
  }
}

TEST_CASE("greedy maximality of every piece") {
  auto v = SubwordVocabulary::from_tokens(
      {"[PAD]", "[UNK]", "un", "unb", "##b", "##e", "##li", "##liev", "##able", "##a", "##ble"});
  auto seq = tokenize("unbelievable", v);
  const std::string word = "unbelievable";
  std::size_t pos = 0;
  for (auto id : seq.ids) {
    const std::string& tok = v.token(id);
    const std::size_t body = pos == 0 ? tok.size() : tok.size() - 2;
    for (std::size_t longer = body + 1; pos + longer <= word.size(); ++longer) {
      std::string cand = (pos ? "##" : "") + word.substr(pos, longer);
      CHECK_FALSE(v.find(cand).has_value());
    }
    pos += body;
  }
}

TEST_CASE("deterministic") {
  auto v = small_vocab();
  auto a = tokenize("Hellos world hell", v);
  auto b = tokenize("Hellos world hell", v);
  CHECK(a.ids == b.ids);
  CHECK(a.vocab_fingerprint == v.fingerprint());
}

}
