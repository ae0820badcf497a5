#include <doctest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "kbalign/kb.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace kbalign;

namespace {

KnowledgeEntry entry(std::string surface, std::vector<float> v = {0.0f, 0.0f}) {
  KnowledgeEntry e;
  e.label = surface;
  std::replace(e.label.begin(), e.label.end(), ' ', '_');
  e.surface = std::move(surface);
  e.vector = std::move(v);
  return e;
}

SubwordVocabulary words(std::vector<std::string> w) {
  std::vector<std::string> t{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  t.insert(t.end(), w.begin(), w.end());
  return SubwordVocabulary::from_tokens(t);
}

std::vector<TokenId> ids(const SubwordVocabulary& v, std::initializer_list<const char*> w) {
  std::vector<TokenId> out;
  for (auto s : w) out.push_back(*v.find(s));
  return out;
}

double residual(std::span<const float> h, std::span<const float> r, std::span<const float> t) {
  double s = 0;
  for (std::size_t k = 0; k < h.size(); ++k) {
    const double d = double(h[k]) + r[k] - t[k];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace

TEST_SUITE("kb") {

TEST_CASE("ingest one line") {
  std::istringstream in("healthy_food 0.1 0.2\n");
  auto e = parse_embeddings(in, 2);
  REQUIRE(e.size() == 1);
  CHECK(e[0].surface == "healthy food");
  CHECK(e[0].label == "healthy_food");
  CHECK(e[0].vector == std::vector<float>{0.1f, 0.2f});
}

TEST_CASE("ingest errors name the line") {
  std::istringstream in("a 1 2\nb 0.1 0.2 0.3\n");
  try {
    parse_embeddings(in, 2);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Parse);
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  std::istringstream nan_in("a nan 1\n");
  CHECK_THROWS_AS(parse_embeddings(nan_in, 2), Error);
  std::istringstream inf_in("a 1 inf\n");
  CHECK_THROWS_AS(parse_embeddings(inf_in, 2), Error);
  std::istringstream empty_label("a 1 2\n 1 2\n");
  CHECK_THROWS_AS(parse_embeddings(empty_label, 2), Error);
  CHECK_THROWS_AS(ingest_embeddings("/nonexistent.txt", 2), Error);
}

TEST_CASE("numberbatch layout with header and 300 columns") {
  std::ostringstream text;
  text << "3 300\n";
  std::mt19937 rng(1);
  std::uniform_real_distribution<float> u(-1, 1);
  for (const char* label : {"/c/en/vitamin", "/c/en/healthy_food", "/c/en/dog"}) {
    text << label;
    for (int k = 0; k < 300; ++k) text << ' ' << u(rng);
    text << '\n';
  }
  std::istringstream in(text.str());
  auto e = parse_embeddings(in, 300);
  REQUIRE(e.size() == 3);
  for (const auto& x : e) CHECK(x.vector.size() == 300);
  auto kept = filter_entries(e, {}, std::string("/c/en/"));
  REQUIRE(kept.size() == 3);
  CHECK(kept[1].surface == "healthy food");
}

TEST_CASE("write then parse round trip") {
  std::vector<KnowledgeEntry> src{entry("healthy food", {0.125f, -3.5f}), entry("dog", {1e-7f, 2.0f})};
  std::ostringstream out;
  write_embeddings(out, src);
  std::istringstream in(out.str());
  auto back = parse_embeddings(in, 2);
  REQUIRE(back.size() == 2);
  for (int i = 0; i < 2; ++i) {
    CHECK(back[i].surface == src[i].surface);
    CHECK(back[i].vector == src[i].vector);
  }
}

TEST_CASE("stopword filtering") {
  std::vector<KnowledgeEntry> e{entry("the"), entry("healthy food")};
  auto kept = filter_entries(e, {"the"});
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].surface == "healthy food");
  CHECK(filter_entries(e, {}).size() == 2);
  // Whole surfaces only.
  CHECK(filter_entries({entry("the dog")}, {"the"}).size() == 1);
}

TEST_CASE("filter equals set difference") {
  std::mt19937_64 rng(3);
  const std::vector<std::string> pool{"a", "b", "c", "d", "e", "a b", "b c", "the", "x y z"};
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<KnowledgeEntry> entries;
    const std::size_t n = std::uniform_int_distribution<std::size_t>(0, 12)(rng);
    for (std::size_t i = 0; i < n; ++i) entries.push_back(entry(pool[pick(rng)]));
    std::unordered_set<std::string> stop;
    const std::size_t s = std::uniform_int_distribution<std::size_t>(0, 4)(rng);
    for (std::size_t i = 0; i < s; ++i) stop.insert(pool[pick(rng)]);

    std::vector<std::string> expected;
    for (const auto& e : entries) {
      bool is_stop = false;
      for (const auto& w : stop) is_stop = is_stop || w == e.surface;
      if (!is_stop) expected.push_back(e.surface);
    }
    auto kept = filter_entries(entries, stop);
    std::vector<std::string> got;
    for (const auto& e : kept) got.push_back(e.surface);
    CHECK(got == expected);
    CHECK(kept.size() <= entries.size());
  }
}

TEST_CASE("triples parse and deduplicate") {
  std::istringstream in("a\tis\tb\na\tis\tb\nb\tis\tc\n");
  auto g = parse_triples(in);
  CHECK(g.size() == 2);
  CHECK(g.entities() == std::vector<std::string>{"a", "b", "c"});
  CHECK(g.relations() == std::vector<std::string>{"is"});
  std::istringstream bad("a\tis\n");
  CHECK_THROWS_AS(parse_triples(bad), Error);
}

TEST_CASE("graph embedding ranking inequality") {
  KnowledgeGraph g;
  g.add({"head", "rel", "tail"});
  CHECK_FALSE(g.add({"head", "rel", "tail"}));
  GraphEmbeddingOptions opt;
  opt.dim = 8;
  opt.epochs = 500;
  opt.margin = 1.0;
  opt.learning_rate = 0.05;
  opt.seed = 4;
  auto emb = embed_graph(g, opt);
  REQUIRE(emb.entities.size() == 2);
  CHECK(emb.epoch_losses.back() == 0.0);
  const auto& h = emb.entities[0].vector;
  const auto& t = emb.entities[1].vector;
  const auto& r = emb.relations[0];
  // Both possible corruptions.
  CHECK(residual(h, r, t) + opt.margin <= residual(h, r, h));
  CHECK(residual(h, r, t) + opt.margin <= residual(t, r, t));
  CHECK(translational_hinge(h, r, t, h, h, opt.margin) == 0.0);
}

TEST_CASE("graph embedding with zero epochs and determinism") {
  KnowledgeGraph g;
  g.add({"a", "r", "b"});
  g.add({"b", "r", "c"});
  g.add({"c", "s", "a"});
  GraphEmbeddingOptions opt;
  opt.dim = 6;
  opt.epochs = 0;
  auto init = embed_graph(g, opt);
  CHECK(init.epoch_losses.empty());
  for (const auto& e : init.entities) {
    double n = 0;
    for (float x : e.vector) n += double(x) * x;
    CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-6));
  }
  CHECK(embed_graph(g, opt).entities[2].vector == init.entities[2].vector);

  opt.epochs = 20;
  auto a = embed_graph(g, opt);
  auto b = embed_graph(g, opt);
  for (std::size_t i = 0; i < a.entities.size(); ++i) CHECK(a.entities[i].vector == b.entities[i].vector);
  CHECK(a.epoch_losses == b.epoch_losses);
  CHECK(a.entities[0].vector != init.entities[0].vector);
  opt.seed = 2;
  CHECK(embed_graph(g, opt).entities[0].vector != a.entities[0].vector);
}

TEST_CASE("graph embedding errors") {
  KnowledgeGraph empty;
  CHECK_THROWS_AS(embed_graph(empty, {}), Error);
  KnowledgeGraph g;
  g.add({"a", "r", "b"});
  GraphEmbeddingOptions opt;
  opt.dim = 0;
  CHECK_THROWS_AS(embed_graph(g, opt), Error);
}

TEST_CASE("index keys and prefixes") {
  auto v = words({"healthy", "food"});
  auto index = KnowledgeIndex::build(std::vector{entry("healthy food")}, v);
  REQUIRE(index.size() == 1);
  CHECK(index.entry(0).key == ids(v, {"healthy", "food"}));
  CHECK(index.is_proper_prefix(ids(v, {"healthy"})));
  CHECK_FALSE(index.is_proper_prefix(ids(v, {"healthy", "food"})));
  CHECK(index.find(ids(v, {"healthy", "food"})) == 0u);
  CHECK_FALSE(index.find(ids(v, {"healthy"})).has_value());
}

TEST_CASE("duplicate keys keep the first entry") {
  auto v = words({"dog"});
  auto index = KnowledgeIndex::build(std::vector{entry("dog", {1, 0}), entry("DOG", {0, 1})}, v);
  CHECK(index.size() == 1);
  CHECK(index.stats().collisions == 1);
  CHECK(index.entry(0).vector == std::vector<float>{1, 0});
}

TEST_CASE("unknown-only keys are dropped") {
  auto v = words({"dog"});
  auto index = KnowledgeIndex::build(std::vector{entry("dog"), entry("zzz qqq")}, v);
  CHECK(index.size() == 1);
  CHECK(index.stats().dropped_unknown == 1);
  CHECK(index.size() <= index.stats().input_entries);
}

TEST_CASE("index build errors") {
  auto v = words({"dog", "cat"});
  CHECK_THROWS_AS(KnowledgeIndex::build(std::vector<KnowledgeEntry>{}, v), Error);
  CHECK_THROWS_AS(KnowledgeIndex::build(std::vector{entry("dog", {1, 2}), entry("cat", {1})}, v), Error);
}

TEST_CASE("longest match examples") {
  auto v = words({"play", "video", "game", "vitamin"});
  auto index = KnowledgeIndex::build(std::vector{entry("video"), entry("video game")}, v);
  auto tokens = ids(v, {"play", "video", "game"});
  auto m = index.longest_match_at(tokens, 1);
  REQUIRE(m.has_value());
  CHECK(m->length == 2);
  CHECK(index.entry(m->entry).surface == "video game");
  CHECK_FALSE(index.longest_match_at(tokens, 0).has_value());
  CHECK_THROWS_AS(index.longest_match_at(tokens, 3), Error);

  KnowledgeIndex empty;
  CHECK_FALSE(empty.longest_match_at(tokens, 0).has_value());

  auto vit = KnowledgeIndex::build(std::vector{entry("vitamin")}, v);
  auto t2 = ids(v, {"vitamin"});
  auto m2 = vit.longest_match_at(t2, 0);
  REQUIRE(m2.has_value());
  CHECK(m2->length == 1);
}

TEST_CASE("longest match equals the try-every-length oracle") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    auto inst = oracle::random_match_instance(rng);
    for (std::size_t s = 0; s < inst.sentence.size(); ++s) {
      auto got = inst.index.longest_match_at(inst.sentence, s);
      auto want = oracle::longest_at(inst.sentence, s, inst.index.entries());
      REQUIRE(got.has_value() == want.has_value());
      if (got) {
        CHECK(got->length == want->first);
        CHECK(got->entry == want->second);
      }
    }
  }
}

TEST_CASE("lookup equals linear scan on 10k keys") {
  std::mt19937_64 rng(23);
  std::uniform_int_distribution<TokenId> tok(0, 999);
  std::uniform_int_distribution<std::size_t> len(1, 4);
  std::vector<KnowledgeEntry> entries;
  for (int i = 0; i < 10000; ++i) {
    KnowledgeEntry e;
    const std::size_t l = len(rng);
    for (std::size_t k = 0; k < l; ++k) e.key.push_back(tok(rng));
    e.surface = std::to_string(i);
    e.vector = {float(i)};
    entries.push_back(std::move(e));
  }
  auto index = KnowledgeIndex::from_keyed(entries, 1, 0, {});
  const auto& stored = index.entries();
  for (std::size_t i = 0; i < stored.size(); ++i) {
    CHECK(index.find(stored[i].key) == oracle::linear_find(stored, stored[i].key));
  }
  int absent = 0;
  for (int probe = 0; probe < 10000; ++probe) {
    std::vector<TokenId> key;
    const std::size_t l = len(rng) + 1;
    for (std::size_t k = 0; k < l; ++k) key.push_back(tok(rng));
    auto want = oracle::linear_find(stored, key);
    if (!want) ++absent;
    CHECK(index.find(key) == want);
  }
  CHECK(absent > 9000);
  // Every proper prefix of a stored key is in the prefix set.
  for (const auto& e : stored) {
    for (std::size_t l = 1; l < e.key.size(); ++l) {
      CHECK(index.is_proper_prefix(std::span(e.key).first(l)));
    }
  }
}

TEST_CASE("index save and load") {
  testutil::TempDir dir;
  auto v = words({"healthy", "food", "dog"});
  auto index = KnowledgeIndex::build(std::vector{entry("healthy food", {1, 2}), entry("dog", {3, 4})}, v);
  index.save(dir / "a.idx");
  auto back = KnowledgeIndex::load(dir / "a.idx");
  CHECK(back.fingerprint() == index.fingerprint());
  CHECK(back.size() == 2);
  CHECK(back.prefix_count() == index.prefix_count());
  CHECK(back.entry(1).vector == std::vector<float>{3, 4});
  index.save(dir / "b.idx");
  CHECK(testutil::read_file(dir / "a.idx") == testutil::read_file(dir / "b.idx"));

  auto bytes = testutil::read_file(dir / "a.idx");
  testutil::write_file(dir / "bad.idx", "nope" + bytes.substr(4));
  CHECK_THROWS_AS(KnowledgeIndex::load(dir / "bad.idx"), Error);
}

}
