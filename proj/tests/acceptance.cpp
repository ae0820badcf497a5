// Acceptance run: one PASS/FAIL line per criterion. Optional arguments pick
// a subset, e.g. `kbalign_acceptance 1 8`.

#include <omp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "align_check.hpp"
#include "kbalign/analysis.hpp"
#include "kbalign/cli.hpp"
#include "kbalign/matcher.hpp"
#include "kbalign/toy_world.hpp"
#include "kbalign/trainer.hpp"
#include "model_check.hpp"
#include "oracles.hpp"
#include "test_util.hpp"
#include "toy_fixture.hpp"

namespace fs = std::filesystem;
using namespace kbalign;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome matcher_oracle() {
  std::mt19937_64 rng(2024);
  const auto t0 = Clock::now();
  std::size_t mismatches = 0, spans = 0;
  for (int i = 0; i < 1000; ++i) {
    auto inst = oracle::random_match_instance(rng);
    const auto got = find_knowledge_expressions(std::span<const TokenId>(inst.sentence), inst.index);
    const auto want = oracle::greedy_match(inst.sentence, inst.entries);
    spans += want.size();
    bool same = got.size() == want.size();
    for (std::size_t k = 0; same && k < got.size(); ++k) {
      // The oracle reports positions in the raw entry list; compare by key.
      same = got[k].start == want[k].start && got[k].end == want[k].end &&
             inst.index.entry(got[k].entry).key == inst.entries[want[k].entry].key &&
             inst.index.entry(got[k].entry).surface == inst.entries[want[k].entry].surface;
    }
    if (!same) ++mismatches;
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 10.0,
          fmt("1000 instances, %zu oracle spans, %zu mismatches, %.2f s", spans, mismatches, secs)};
}

Outcome gradients() {
  std::mt19937_64 rng(77);
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string where;
  std::size_t checks = 0;
  for (int i = 0; i < 100; ++i) {
    for (auto head : {HeadKind::Classification, HeadKind::Binary, HeadKind::MaskedToken}) {
      auto c = modelcheck::random_case(rng, head);
      const auto r = modelcheck::check_gradients(c, rng, 0);
      checks += r.checked;
      if (r.max_rel_error > worst) {
        worst = r.max_rel_error;
        where = std::string(head_kind_name(head)) + "/" + r.worst_tensor;
      }
    }
    for (auto v : {AlignmentVariant::SquaredL2, AlignmentVariant::SmoothL1, AlignmentVariant::Cosine}) {
      auto c = aligncheck::random_case(rng);
      const double e = aligncheck::check(c, v);
      ++checks;
      if (e > worst) {
        worst = e;
        where = "align/" + std::string(alignment_variant_name(v));
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0,
          fmt("100 configs x (3 heads + 3 variants), %zu entries, worst rel. error %.2e (%s), %.1f s", checks,
              worst, where.c_str(), secs)};
}

Outcome lambda_zero() {
  auto f = toy::make(ToyWorldOptions{}, 50);
  auto base = f.config(Strategy::Baseline, 0.0, 11);
  base.pretrain_epochs = 2;
  base.finetune_epochs = 1;
  auto zero = base;
  zero.strategy = Strategy::PT_FT;
  const auto a = run_strategy(base, f.corpus, f.task, f.index, f.vocab);
  const auto b = run_strategy(zero, f.corpus, f.task, f.index, f.vocab);
  std::size_t steps = 0;
  for (const auto& p : a.phases) steps += p.steps;
  const bool same = a.checkpoint.params == b.checkpoint.params;
  return {same && steps >= 100,
          fmt("%zu optimizer steps, parameters %s", steps, same ? "bitwise identical" : "differ")};
}

// ---------------------------------------------------------------------------
// Criteria 4-7 share one set of runs.

struct ModelRun {
  double accuracy = 0, affected = 0, unaffected = 0, synonym_ratio = 0, wc_best = 0, wc_shuffled = 0;
  std::size_t wc_classes = 0;
};

struct Experiment {
  // [seed][model]; models are baseline (λ=0), PT+FT, PT+FT on the ablated index.
  std::vector<std::array<ModelRun, 3>> runs;
  bool leak_free = true;
  double seconds = 0;
};

const std::string kAblated = "food";

Experiment run_experiment() {
  Experiment ex;
  const auto t0 = Clock::now();
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    ToyWorldOptions o;
    o.seed = 100 + seed;
    auto f = toy::make(o);
    for (const auto& q : f.world.train) {
      for (const auto& e : f.world.entities) {
        if (!e.train && (" " + q.text + " ").find(" " + e.name + " ") != std::string::npos) ex.leak_free = false;
      }
    }
    const std::vector<std::string> kw{kAblated};
    const auto ablated = ablate_index(f.index, kw);
    const auto wc = word_content_task(f.world.probe_sentences, f.world.probe_targets);

    std::array<ModelRun, 3> row;
    const std::array<std::pair<double, const KnowledgeIndex*>, 3> models{
        {{0.0, &f.index}, {1.0, &f.index}, {1.0, &ablated.index}}};
    for (std::size_t m = 0; m < 3; ++m) {
      auto cfg = f.config(m == 0 ? Strategy::Baseline : Strategy::PT_FT, models[m].first, seed);
      const auto r = run_strategy(cfg, f.corpus, f.task, *models[m].second, f.vocab);
      auto& out = row[m];
      out.accuracy = r.metrics.accuracy;
      double aff = 0, un = 0;
      std::size_t na = 0, nu = 0;
      for (const auto& [tag, tm] : r.metrics.by_tag) {
        if (tag.rfind("domain:", 0) != 0) continue;
        const bool hit = tag == "domain:" + kAblated;
        (hit ? aff : un) += tm.accuracy * double(tm.count);
        (hit ? na : nu) += tm.count;
      }
      out.affected = na ? aff / double(na) : 0;
      out.unaffected = nu ? un / double(nu) : 0;
      out.synonym_ratio = synonym_distance_report(word_embedding_table(r.checkpoint), f.vocab,
                                                  f.world.synonym_pairs, 500, 9)
                              .ratio;
      const auto sweep = probe_layers(r.checkpoint, f.vocab, wc, std::nullopt, 5);
      out.wc_best = sweep.best.accuracy;
      out.wc_classes = sweep.best.classes;
      out.wc_shuffled = probe_layers(r.checkpoint, f.vocab, wc, std::nullopt, 5, {}, true).best.accuracy;
      std::printf("  seed %llu %-9s acc %.3f affected %.3f unaffected %.3f synonym %.3f wc %.3f shuffled %.3f\n",
                  static_cast<unsigned long long>(seed), m == 0 ? "baseline" : m == 1 ? "pt+ft" : "ablated",
                  out.accuracy, out.affected, out.unaffected, out.synonym_ratio, out.wc_best, out.wc_shuffled);
      std::fflush(stdout);
    }
    ex.runs.push_back(row);
  }
  ex.seconds = seconds_since(t0);
  return ex;
}

Experiment& experiment() {
  static std::optional<Experiment> ex;
  if (!ex) ex = run_experiment();
  return *ex;
}

double mean_of(const Experiment& ex, std::size_t model, double ModelRun::*field) {
  double s = 0;
  for (const auto& r : ex.runs) s += r[model].*field;
  return s / double(ex.runs.size());
}

Outcome knowledge_injection() {
  const auto& ex = experiment();
  const double base = mean_of(ex, 0, &ModelRun::accuracy), aligned = mean_of(ex, 1, &ModelRun::accuracy);
  const double gain = 100.0 * (aligned - base);
  return {ex.leak_free && gain >= 10.0 && ex.seconds < 900.0,
          fmt("held-out accuracy baseline %.1f%%, PT+FT %.1f%%, gain %.1f points; test entities %s task "
              "training text; %.0f s for all runs",
              100 * base, 100 * aligned, gain, ex.leak_free ? "absent from" : "LEAK into", ex.seconds)};
}

Outcome ablation() {
  const auto& ex = experiment();
  const double base_aff = mean_of(ex, 0, &ModelRun::affected);
  const double abl_aff = mean_of(ex, 2, &ModelRun::affected);
  const double full_un = mean_of(ex, 1, &ModelRun::unaffected);
  const double abl_un = mean_of(ex, 2, &ModelRun::unaffected);
  const double gap = 100.0 * std::abs(abl_aff - base_aff), drift = 100.0 * std::abs(abl_un - full_un);
  return {gap <= 5.0 && drift < 2.0,
          fmt("affected: ablated %.1f%% vs baseline %.1f%% (%.1f points, full %.1f%%); unaffected: %.1f%% vs "
              "%.1f%% (%.1f points)",
              100 * abl_aff, 100 * base_aff, gap, 100 * mean_of(ex, 1, &ModelRun::affected), 100 * abl_un,
              100 * full_un, drift)};
}

Outcome embedding_structure() {
  const auto& ex = experiment();
  bool ok = true;
  std::string per;
  for (const auto& r : ex.runs) {
    ok = ok && r[1].synonym_ratio < 1.0 && r[1].synonym_ratio < r[0].synonym_ratio;
    per += fmt(" %.3f<%.3f", r[1].synonym_ratio, r[0].synonym_ratio);
  }
  return {ok, "aligned vs baseline ratio per seed:" + per};
}

Outcome probing() {
  const auto& ex = experiment();
  bool ok = true;
  double worst_shuffle = 0;
  std::string per;
  for (const auto& r : ex.runs) {
    ok = ok && r[1].wc_best >= r[0].wc_best;
    per += fmt(" %.3f>=%.3f", r[1].wc_best, r[0].wc_best);
    for (const auto& m : r) {
      const double chance = 1.0 / double(m.wc_classes);
      worst_shuffle = std::max(worst_shuffle, std::abs(m.wc_shuffled - chance));
    }
  }
  ok = ok && worst_shuffle <= 0.1;
  return {ok, "WC best-layer aligned vs baseline per seed:" + per +
                  fmt("; shuffled labels at most %.3f from chance (%zu classes)", worst_shuffle,
                      ex.runs.front()[0].wc_classes)};
}

// ---------------------------------------------------------------------------

Outcome index_performance() {
  std::mt19937_64 rng(8);
  constexpr std::size_t kEntries = 500000, kVocab = 60000, kTokens = 1000000, kSentence = 25;
  std::uniform_int_distribution<TokenId> tok(2, kVocab - 1);
  std::uniform_int_distribution<std::size_t> len(1, 4);
  std::uniform_real_distribution<float> u(-1, 1);
  std::vector<KnowledgeEntry> entries;
  std::set<std::vector<TokenId>> seen;
  while (entries.size() < kEntries) {
    KnowledgeEntry e;
    const std::size_t l = len(rng);
    for (std::size_t k = 0; k < l; ++k) e.key.push_back(tok(rng));
    if (!seen.insert(e.key).second) continue;
    e.surface = "entity" + std::to_string(entries.size());
    e.vector = {u(rng), u(rng), u(rng), u(rng)};
    entries.push_back(std::move(e));
  }
  const auto index = KnowledgeIndex::from_keyed(entries, 4, 0, {});

  // Half the tokens come from copied keys so the scan keeps finding matches.
  std::vector<TokenSequence> corpus;
  std::size_t total = 0;
  std::bernoulli_distribution copy(0.3);
  std::uniform_int_distribution<std::size_t> pick(0, kEntries - 1);
  while (total < kTokens) {
    TokenSequence s;
    while (s.ids.size() < kSentence && total + s.ids.size() < kTokens) {
      if (copy(rng)) {
        for (TokenId t : entries[pick(rng)].key) s.ids.push_back(t);
      } else {
        s.ids.push_back(tok(rng));
      }
    }
    total += s.ids.size();
    corpus.push_back(std::move(s));
  }

  const int threads = omp_get_max_threads();
  omp_set_num_threads(1);
  const auto t0 = Clock::now();
  const auto matches = serial::match_corpus(corpus, index);
  const double secs = seconds_since(t0);
  omp_set_num_threads(threads);

  std::size_t spans = 0, unsound = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    for (const auto& m : matches[i]) {
      ++spans;
      const auto& key = index.entry(m.entry).key;
      if (!std::equal(key.begin(), key.end(), corpus[i].ids.begin() + std::ptrdiff_t(m.start),
                      corpus[i].ids.begin() + std::ptrdiff_t(m.end))) {
        ++unsound;
      }
    }
  }

  // 10k stored keys and 10k random probes against one linear pass over the
  // stored entries that keeps the first occurrence of each queried key.
  std::vector<std::vector<TokenId>> queries;
  for (int i = 0; i < 10000; ++i) queries.push_back(index.entry(std::uint32_t(pick(rng) % index.size())).key);
  for (int i = 0; i < 10000; ++i) {
    std::vector<TokenId> k;
    const std::size_t l = len(rng);
    for (std::size_t j = 0; j < l; ++j) k.push_back(tok(rng));
    queries.push_back(std::move(k));
  }
  std::map<std::vector<TokenId>, std::optional<std::uint32_t>> scan;
  for (const auto& q : queries) scan[q] = std::nullopt;
  const auto& stored = index.entries();
  for (std::size_t e = 0; e < stored.size(); ++e) {
    auto it = scan.find(stored[e].key);
    if (it != scan.end() && !it->second) it->second = std::uint32_t(e);
  }
  std::size_t wrong = 0;
  for (const auto& q : queries) {
    if (index.find(q) != scan.at(q)) ++wrong;
  }

  return {secs < 10.0 && unsound == 0 && wrong == 0,
          fmt("%zu entries, %zu tokens in %zu sentences matched in %.2f s on 1 thread (%zu spans, %zu unsound); "
              "%zu/20000 lookups disagree with linear scan",
              index.size(), total, corpus.size(), secs, spans, unsound, wrong)};
}

// ---------------------------------------------------------------------------

Outcome pipeline() {
  const fs::path data = KBALIGN_TEST_DATA_DIR;
  testutil::TempDir tmp("kbalign-acceptance");
  std::vector<std::string> log;
  auto cli = [&](std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    std::string name = args[0];
    if (args.size() > 1 && args[1][0] != '-') name += " " + args[1];
    if (code != 0) log.push_back(name + " exited " + std::to_string(code) + ": " + err.str());
    return std::make_pair(code, out.str());
  };
  const auto t0 = Clock::now();
  const auto d = [&](const char* f) { return (data / f).string(); };
  const auto t = [&](const char* f) { return (tmp / f).string(); };

  testutil::write_file(tmp / "stopwords.txt", "the\nare\nthere\n");
  bool ok = cli({"kb", "embed-graph", "--triples", d("triples.tsv"), "--dim", "16", "--epochs", "300", "--lr",
                 "0.05", "--margin", "0.5", "--seed", "3", "--out", t("graph.txt")})
                .first == 0;
  ok = ok && cli({"kb", "ingest", "--embeddings", t("graph.txt"), "--dim", "16", "--stopwords", t("stopwords.txt"),
                  "--out", t("kb.txt")})
                     .first == 0;
  ok = ok && cli({"kb", "build-index", "--embeddings", t("kb.txt"), "--dim", "16", "--vocab", d("vocab.txt"),
                  "--out", t("toy.kbi")})
                     .first == 0;
  ok = ok && cli({"match", "--index", t("toy.kbi"), "--vocab", d("vocab.txt"), "--input", d("corpus.txt"),
                  "--out", t("matches.jsonl")})
                     .first == 0;
  std::size_t matched_lines = 0;
  if (ok) {
    std::istringstream in(testutil::read_file(tmp / "matches.jsonl"));
    std::string line;
    while (std::getline(in, line)) matched_lines += !json::parse(line)["spans"].empty();
  }
  for (const std::string strategy : {"baseline", "ft", "pt", "pt+ft"}) {
    for (const std::string seed : {"1", "2", "3"}) {
      if (!ok) break;
      ok = cli({"train", "--config", d("config.json"), "--index", t("toy.kbi"), "--strategy", strategy, "--seed",
                seed, "--out", (tmp / "runs" / (strategy + "-" + seed)).string()})
               .first == 0;
    }
  }
  const std::string ckpt = (tmp / "runs" / "pt+ft-1" / "checkpoint.ckpt").string();
  ok = ok && cli({"analyze", "neighbors", "--checkpoint", ckpt, "--vocab", d("vocab.txt"), "--word", "food"})
                     .first == 0;
  ok = ok && cli({"analyze", "ablate", "--index", t("toy.kbi"), "--keywords", d("keywords.txt"), "--out",
                  t("ablated.kbi")})
                     .first == 0;
  ok = ok && cli({"analyze", "synonyms", "--checkpoint", ckpt, "--vocab", d("vocab.txt"), "--pairs", d("pairs.txt")})
                     .first == 0;
  ok = ok && cli({"analyze", "probe", "--checkpoint", ckpt, "--vocab", d("vocab.txt"), "--sentences",
                  d("probe_sentences.txt"), "--targets", d("probe_targets.txt")})
                     .first == 0;
  std::string table;
  std::size_t rows_with_spread = 0;
  if (ok) {
    auto [code, out] = cli({"report", "--runs", (tmp / "runs").string(), "--json", t("report.json")});
    ok = code == 0;
    table = out;
    if (ok) {
      const auto summary = json::parse(testutil::read_file(tmp / "report.json"));
      for (const auto& row : summary["rows"]) rows_with_spread += row["runs"] == 3;
    }
    std::istringstream in(out);
    std::string line;
    while (std::getline(in, line)) std::printf("  | %s\n", line.c_str());
  }
  ok = ok && rows_with_spread == 4 && table.find("±") != std::string::npos;
  std::string detail = fmt("%zu/800 corpus lines matched, %zu report rows with 3 seeds, %.0f s", matched_lines,
                           rows_with_spread, seconds_since(t0));
  for (const auto& l : log) detail += "; " + l;
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, matcher_oracle},   {2, gradients},     {3, lambda_zero},      {4, knowledge_injection}, {5, ablation},
      {6, embedding_structure}, {7, probing},    {8, index_performance}, {9, pipeline}};
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& [id, fn] : criteria) {
    if (!wanted.empty() && !wanted.count(id)) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %d: %s - %s\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
