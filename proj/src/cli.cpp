#include "kbalign/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include <omp.h>

#include <CLI11.hpp>

#include "kbalign/analysis.hpp"
#include "kbalign/kb.hpp"
#include "kbalign/matcher.hpp"
#include "kbalign/tokenizer.hpp"
#include "kbalign/trainer.hpp"

namespace kbalign {

using nlohmann::json;
namespace fs = std::filesystem;

int exit_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Io: return 3;
    case ErrorKind::Parse: return 4;
    case ErrorKind::InvalidArgument: return 5;
    case ErrorKind::Fingerprint: return 6;
    case ErrorKind::Numeric: return 7;
  }
  return 1;
}

namespace {

fs::path resolve(const std::string& p) {
  fs::path path(p);
  if (path.is_relative()) {
    if (const char* root = std::getenv("KBALIGN_DATA_ROOT"); root && *root) return fs::path(root) / path;
  }
  return path;
}

fs::path existing(const std::string& p, const char* what) {
  const fs::path path = resolve(p);
  if (!fs::exists(path)) throw Error(ErrorKind::Io, std::string(what) + " not found: " + path.string());
  return path;
}

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  return out;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Parse, path.string() + ": " + e.what());
  }
}

std::string format_number(double v) {
  std::ostringstream s;
  s.imbue(std::locale::classic());
  s << std::setprecision(6) << v;
  return s.str();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

// Writes `text` to `out_path` when given, otherwise to the stream.
void emit(const std::string& text, const std::string& out_path, std::ostream& out) {
  if (out_path.empty()) {
    out << text;
  } else {
    auto f = open_output(out_path);
    f << text;
  }
}

// ---------------------------------------------------------------------------

struct TokenizeArgs {
  std::string vocab, input, out;
  std::size_t max_len = kDefaultMaxTokens;
  std::vector<std::string> text;
};

void cmd_tokenize(const TokenizeArgs& a, std::ostream& out) {
  const auto vocab = SubwordVocabulary::load(existing(a.vocab, "vocabulary"));
  std::vector<std::string> lines = a.text;
  if (!a.input.empty()) {
    auto more = read_lines(existing(a.input, "input"));
    lines.insert(lines.end(), more.begin(), more.end());
  }
  std::ostringstream s;
  for (const auto& line : lines) {
    const auto seq = a.max_len == 0 ? tokenize_unbounded(line, vocab) : tokenize(line, vocab, a.max_len);
    json tokens = json::array();
    for (TokenId id : seq.ids) tokens.push_back(vocab.token(id));
    s << json{{"text", line}, {"tokens", tokens}, {"ids", seq.ids}}.dump() << '\n';
  }
  emit(s.str(), a.out, out);
}

struct KbArgs {
  std::string embeddings, triples, vocab, stopwords, prefix, out;
  std::size_t dim = 0;
  GraphEmbeddingOptions graph;
};

void cmd_kb_ingest(const KbArgs& a, std::ostream& out) {
  auto entries = ingest_embeddings(existing(a.embeddings, "embedding file"), a.dim);
  const std::size_t read = entries.size();
  std::unordered_set<std::string> stop;
  if (!a.stopwords.empty()) stop = load_word_list(existing(a.stopwords, "stopword list"));
  entries = filter_entries(std::move(entries), stop,
                           a.prefix.empty() ? std::nullopt : std::optional<std::string>(a.prefix));
  auto f = open_output(a.out);
  write_embeddings(f, entries);
  out << json{{"read", read}, {"kept", entries.size()}, {"dim", a.dim}, {"out", a.out}}.dump() << '\n';
}

void cmd_kb_embed_graph(const KbArgs& a, std::ostream& out) {
  const auto graph = load_triples(existing(a.triples, "triple file"));
  const auto emb = embed_graph(graph, a.graph);
  auto f = open_output(a.out);
  write_embeddings(f, emb.entities);
  out << json{{"triples", graph.size()},
              {"entities", graph.entities().size()},
              {"relations", graph.relations().size()},
              {"dim", a.graph.dim},
              {"final_loss", emb.epoch_losses.empty() ? 0.0 : emb.epoch_losses.back()},
              {"out", a.out}}
             .dump()
      << '\n';
}

void cmd_kb_build_index(const KbArgs& a, std::ostream& out) {
  const auto vocab = SubwordVocabulary::load(existing(a.vocab, "vocabulary"));
  const auto entries = ingest_embeddings(existing(a.embeddings, "embedding file"), a.dim);
  const auto index = KnowledgeIndex::build(entries, vocab);
  index.save(a.out);
  const auto& st = index.stats();
  out << json{{"entries", index.size()},
              {"input_entries", st.input_entries},
              {"dropped_unknown", st.dropped_unknown},
              {"collisions", st.collisions},
              {"prefixes", index.prefix_count()},
              {"dim", index.dim()},
              {"fingerprint", fingerprint_hex(index.fingerprint())},
              {"out", a.out}}
             .dump()
      << '\n';
}

struct MatchArgs {
  std::string index, vocab, input, out;
  std::size_t max_len = 0;
};

void cmd_match(const MatchArgs& a, std::ostream& out) {
  const auto vocab = SubwordVocabulary::load(existing(a.vocab, "vocabulary"));
  const auto index = KnowledgeIndex::load(existing(a.index, "index"));
  const auto lines = read_lines(existing(a.input, "input"));
  std::vector<TokenSequence> seqs;
  seqs.reserve(lines.size());
  for (const auto& l : lines) seqs.push_back(a.max_len == 0 ? tokenize_unbounded(l, vocab) : tokenize(l, vocab, a.max_len));
  for (const auto& s : seqs) {
    if (s.vocab_fingerprint != index.vocab_fingerprint()) {
      throw Error(ErrorKind::Fingerprint, "index was built with vocabulary " +
                                              fingerprint_hex(index.vocab_fingerprint()) + ", input uses " +
                                              fingerprint_hex(s.vocab_fingerprint));
    }
    break;
  }
  const auto matches = parallel::match_corpus(seqs, index);
  std::ostringstream s;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    json spans = json::array();
    for (const auto& m : matches[i]) {
      spans.push_back({{"start", m.start}, {"end", m.end}, {"surface", index.entry(m.entry).surface}});
    }
    s << json{{"sentence", lines[i]}, {"spans", std::move(spans)}}.dump() << '\n';
  }
  emit(s.str(), a.out, out);
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, strategy, vocab, index, corpus, task_train, task_test, head, out;
  std::optional<double> lambda;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> pretrain_epochs, finetune_epochs;
  bool text_only = false;
};

// Flags win; relative paths from the config file are taken relative to its directory.
std::string path_setting(const std::string& flag, const json& paths, const char* key, const fs::path& base = {}) {
  if (!flag.empty()) return flag;
  if (!paths.contains(key)) return {};
  const fs::path p = paths.at(key).get<std::string>();
  if (p.is_absolute() || base.empty()) return p.string();
  return (base / p).string();
}

void cmd_train(const TrainArgs& a, std::ostream& out) {
  json cfg_json = json::object();
  fs::path base;
  if (!a.config.empty()) {
    const fs::path cfg_path = fs::absolute(existing(a.config, "config file"));
    base = cfg_path.parent_path();
    cfg_json = read_json(cfg_path);
  }
  const json paths = cfg_json.value("paths", json::object());
  const json model_json = cfg_json.value("model", json::object());

  TrainConfig config = TrainConfig::from_json(cfg_json);
  if (!a.strategy.empty()) config.strategy = parse_strategy(a.strategy);
  if (a.lambda) config.lambda = *a.lambda;
  if (a.seed) config.seed = *a.seed;
  if (a.pretrain_epochs) config.pretrain_epochs = *a.pretrain_epochs;
  if (a.finetune_epochs) config.finetune_epochs = *a.finetune_epochs;
  if (a.text_only) config.model.text_only = true;

  auto need = [&](const std::string& flag, const char* key, const char* what) {
    const auto v = path_setting(flag, paths, key, base);
    if (v.empty()) throw Error(ErrorKind::InvalidArgument, std::string("missing ") + what + " (--" + key + ")");
    return existing(v, what);
  };
  const auto vocab = SubwordVocabulary::load(need(a.vocab, "vocab", "vocabulary"));
  const auto index = KnowledgeIndex::load(need(a.index, "index", "index"));
  const auto corpus_lines = read_lines(need(a.corpus, "corpus", "corpus"));
  const auto train_examples = load_task_examples(need(a.task_train, "task_train", "task training data"));
  const auto test_examples = load_task_examples(need(a.task_test, "task_test", "task test data"));
  const std::string out_dir = path_setting(a.out, paths, "out", base);
  if (out_dir.empty()) throw Error(ErrorKind::InvalidArgument, "missing output directory (--out)");

  const std::string head = !a.head.empty() ? a.head : paths.value("head", std::string("classification"));
  const auto task = make_task_data(train_examples, test_examples, parse_head_kind(head));

  if (!model_json.contains("vocab_size")) config.model.vocab_size = vocab.size();
  if (!model_json.contains("d_v")) config.model.d_v = index.dim();
  if (!model_json.contains("num_answers") && task.head == HeadKind::Classification) {
    config.model.num_answers = std::max<std::size_t>(2, task.answers.size());
  }
  config.validate();

  const std::size_t reserved = (vocab.cls_id() ? 1 : 0) + (vocab.sep_id() ? 1 : 0);
  if (config.model.max_text_len <= reserved) throw Error(ErrorKind::InvalidArgument, "max_text_len too small");
  const auto corpus = tokenize_corpus(corpus_lines, vocab, config.model.max_text_len - reserved);

  auto result = run_strategy(config, corpus, task, index, vocab);
  fs::create_directories(out_dir);
  result.checkpoint.save(fs::path(out_dir) / "checkpoint.ckpt");
  json report = result.report;
  report["run_info"] = {{"timestamp", utc_timestamp()}, {"threads", omp_get_max_threads()}};
  {
    auto f = open_output(fs::path(out_dir) / "report.json");
    f << report.dump(2) << '\n';
  }
  out << json{{"strategy", strategy_name(config.strategy)},
              {"seed", config.seed},
              {"lambda", config.lambda},
              {"accuracy", result.metrics.accuracy},
              {"out", out_dir}}
             .dump()
      << '\n';
}

// ---------------------------------------------------------------------------

struct AnalyzeArgs {
  std::string checkpoint, vocab, index, keywords, pairs, sentences, targets, task = "wc", layers = "all",
                                                                         metric = "l2", format = "json", out;
  std::vector<std::string> words;
  std::size_t k = 10, control = 1000, buckets = 3;
  std::uint64_t seed = 1;
  bool shuffle_labels = false;
};

void check_format(const std::string& f) {
  if (f != "json" && f != "csv") throw Error(ErrorKind::InvalidArgument, "format must be json or csv");
}

struct LoadedModel {
  Checkpoint ckpt;
  SubwordVocabulary vocab;
};

LoadedModel load_model(const AnalyzeArgs& a) {
  if (a.checkpoint.empty() || a.vocab.empty()) {
    throw Error(ErrorKind::InvalidArgument, "--checkpoint and --vocab are required");
  }
  LoadedModel m{Checkpoint::load(existing(a.checkpoint, "checkpoint")),
                SubwordVocabulary::load(existing(a.vocab, "vocabulary"))};
  if (m.ckpt.vocab_fingerprint != m.vocab.fingerprint()) {
    throw Error(ErrorKind::Fingerprint, "checkpoint vocabulary " + fingerprint_hex(m.ckpt.vocab_fingerprint) +
                                            " does not match " + fingerprint_hex(m.vocab.fingerprint()));
  }
  return m;
}

void cmd_neighbors(const AnalyzeArgs& a, std::ostream& out) {
  check_format(a.format);
  if (a.words.empty()) throw Error(ErrorKind::InvalidArgument, "--word is required");
  const auto m = load_model(a);
  const auto metric = parse_distance_metric(a.metric);
  const auto table = word_embedding_table(m.ckpt);
  std::ostringstream s;
  if (a.format == "csv") s << "query,rank,word,distance\n";
  json all = json::array();
  for (const auto& w : a.words) {
    const auto r = nearest_neighbors(table, m.vocab, w, a.k, metric);
    if (a.format == "csv") {
      for (std::size_t i = 0; i < r.neighbors.size(); ++i) {
        s << csv_field(r.query) << ',' << i + 1 << ',' << csv_field(r.neighbors[i].word) << ','
          << format_number(r.neighbors[i].distance) << '\n';
      }
    } else {
      all.push_back(to_json(r));
    }
  }
  if (a.format == "json") s << (all.size() == 1 ? all[0] : all).dump(2) << '\n';
  emit(s.str(), a.out, out);
}

void cmd_ablate(const AnalyzeArgs& a, std::ostream& out) {
  if (a.index.empty() || a.keywords.empty() || a.out.empty()) {
    throw Error(ErrorKind::InvalidArgument, "--index, --keywords and --out are required");
  }
  const auto index = KnowledgeIndex::load(existing(a.index, "index"));
  const auto words = read_lines(existing(a.keywords, "keyword list"));
  const auto r = ablate_index(index, words);
  r.index.save(a.out);
  out << json{{"removed", r.removed},
              {"remaining", r.index.size()},
              {"removed_surfaces", r.removed_surfaces},
              {"fingerprint", fingerprint_hex(r.index.fingerprint())},
              {"out", a.out}}
             .dump(2)
      << '\n';
}

void cmd_synonyms(const AnalyzeArgs& a, std::ostream& out) {
  check_format(a.format);
  if (a.pairs.empty()) throw Error(ErrorKind::InvalidArgument, "--pairs is required");
  const auto m = load_model(a);
  const auto pairs = load_word_pairs(existing(a.pairs, "pair list"));
  const auto r = synonym_distance_report(word_embedding_table(m.ckpt), m.vocab, pairs, a.control, a.seed);
  std::ostringstream s;
  if (a.format == "csv") {
    s << "pairs,random_pairs,pair_mean,random_mean,ratio\n"
      << r.pairs << ',' << r.random_pairs << ',' << format_number(r.pair_mean) << ','
      << format_number(r.random_mean) << ',' << format_number(r.ratio) << '\n';
  } else {
    s << to_json(r).dump(2) << '\n';
  }
  emit(s.str(), a.out, out);
}

std::optional<std::vector<std::size_t>> parse_layers(const std::string& spec) {
  if (spec == "all") return std::nullopt;
  std::vector<std::size_t> layers;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      layers.push_back(std::stoul(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error(ErrorKind::InvalidArgument, "invalid layer list '" + spec + "'");
    }
  }
  return layers;
}

void cmd_probe(const AnalyzeArgs& a, std::ostream& out) {
  check_format(a.format);
  if (a.sentences.empty()) throw Error(ErrorKind::InvalidArgument, "--sentences is required");
  const auto m = load_model(a);
  const auto sentences = read_lines(existing(a.sentences, "sentence file"));
  ProbeDataset data;
  if (a.task == "wc") {
    if (a.targets.empty()) throw Error(ErrorKind::InvalidArgument, "word-content probing needs --targets");
    data = word_content_task(sentences, read_lines(existing(a.targets, "target list")));
  } else if (a.task == "sentlen") {
    const std::size_t reserved = (m.vocab.cls_id() ? 1 : 0) + (m.vocab.sep_id() ? 1 : 0);
    data = sentence_length_task(sentences, m.vocab, a.buckets, m.ckpt.model.max_text_len - reserved);
  } else {
    throw Error(ErrorKind::InvalidArgument, "unknown probing task '" + a.task + "' (wc, sentlen)");
  }
  const auto sweep = probe_layers(m.ckpt, m.vocab, data, parse_layers(a.layers), a.seed, {}, a.shuffle_labels);
  std::ostringstream s;
  if (a.format == "csv") {
    s << "task,layer,accuracy,classes,train,test\n";
    for (const auto& r : sweep.layers) {
      s << r.task << ',' << r.layer << ',' << format_number(r.accuracy) << ',' << r.classes << ','
        << r.train_count << ',' << r.test_count << '\n';
    }
  } else {
    s << to_json(sweep).dump(2) << '\n';
  }
  emit(s.str(), a.out, out);
}

// ---------------------------------------------------------------------------

struct ReportArgs {
  std::string runs, json_out, format = "table";
  bool force = false;
};

struct Aggregate {
  std::vector<double> accuracy;
  std::vector<std::uint64_t> seeds;
};

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= double(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / double(v.size() - 1))};
}

int strategy_rank(const std::string& s) {
  static const std::vector<std::string> order = {"baseline", "ft", "pt", "pt+ft"};
  const auto it = std::find(order.begin(), order.end(), s);
  return static_cast<int>(it - order.begin());
}

void cmd_report(const ReportArgs& a, std::ostream& out) {
  if (a.format != "table" && a.format != "csv" && a.format != "json") {
    throw Error(ErrorKind::InvalidArgument, "format must be table, csv or json");
  }
  const fs::path root = existing(a.runs, "runs directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_regular_file() && entry.path().filename() == "report.json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error(ErrorKind::InvalidArgument, "no report.json files under " + root.string());

  using Key = std::tuple<int, std::string, double, std::string>;
  std::map<Key, Aggregate> groups;
  std::set<std::string> fingerprints;
  for (const auto& f : files) {
    const json r = read_json(f);
    try {
      if (r.at("kind") != "kbalign-run") continue;
      fingerprints.insert(r.at("experiment_fingerprint").get<std::string>());
      const std::string strategy = r.at("strategy").get<std::string>();
      const Key key{strategy_rank(strategy), strategy, r.at("lambda").get<double>(), r.at("variant").get<std::string>()};
      auto& g = groups[key];
      g.accuracy.push_back(r.at("metrics").at("accuracy").get<double>());
      g.seeds.push_back(r.at("seed").get<std::uint64_t>());
    } catch (const json::exception& e) {
      throw Error(ErrorKind::Parse, f.string() + ": " + e.what());
    }
  }
  if (fingerprints.size() > 1 && !a.force) {
    std::string list;
    for (const auto& fp : fingerprints) list += (list.empty() ? "" : ", ") + fp;
    throw Error(ErrorKind::Fingerprint, "runs come from different experiments (" + list + "); use --force to aggregate anyway");
  }

  json rows = json::array();
  std::ostringstream table, csv;
  table << std::left << std::setw(10) << "strategy" << std::setw(10) << "lambda" << std::setw(12) << "variant"
        << std::setw(6) << "runs" << "accuracy (%)\n";
  csv << "strategy,lambda,variant,runs,mean,std\n";
  for (const auto& [key, g] : groups) {
    const auto& [rank, strategy, lambda, variant] = key;
    const auto [mean, sd] = mean_std(g.accuracy);
    std::ostringstream acc;
    acc << std::fixed << std::setprecision(2) << 100.0 * mean << " ± " << 100.0 * sd;
    table << std::left << std::setw(10) << strategy << std::setw(10) << format_number(lambda) << std::setw(12)
          << variant << std::setw(6) << g.accuracy.size() << acc.str() << '\n';
    csv << strategy << ',' << format_number(lambda) << ',' << variant << ',' << g.accuracy.size() << ','
        << format_number(mean) << ',' << format_number(sd) << '\n';
    rows.push_back({{"strategy", strategy},
                    {"lambda", lambda},
                    {"variant", variant},
                    {"runs", g.accuracy.size()},
                    {"seeds", g.seeds},
                    {"accuracy_mean", mean},
                    {"accuracy_std", sd}});
  }
  const json summary = {{"kind", "kbalign-report"},
                        {"experiment_fingerprints", fingerprints},
                        {"forced", fingerprints.size() > 1},
                        {"rows", rows}};
  if (!a.json_out.empty()) {
    auto f = open_output(a.json_out);
    f << summary.dump(2) << '\n';
  }
  if (a.format == "json") {
    out << summary.dump(2) << '\n';
  } else if (a.format == "csv") {
    out << csv.str();
  } else {
    out << table.str();
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Knowledge-base alignment toolkit", "kbalign"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for all subcommands");

  TokenizeArgs tok;
  auto* c_tok = app.add_subcommand("tokenize", "Tokenize text with a subword vocabulary");
  c_tok->add_option("--vocab", tok.vocab, "Vocabulary file")->required();
  c_tok->add_option("--max-len", tok.max_len, "Maximum tokens (0 = unbounded)");
  c_tok->add_option("--input", tok.input, "File with one text per line");
  c_tok->add_option("--out", tok.out, "Output file (default stdout)");
  c_tok->add_option("text", tok.text, "Texts to tokenize");

  KbArgs kb;
  auto* c_kb = app.add_subcommand("kb", "Knowledge-base preparation");
  c_kb->require_subcommand(1);
  auto* c_ingest = c_kb->add_subcommand("ingest", "Read, filter and rewrite a word2vec-format embedding file");
  c_ingest->add_option("--embeddings", kb.embeddings, "Embedding file")->required();
  c_ingest->add_option("--dim", kb.dim, "Vector dimension")->required();
  c_ingest->add_option("--stopwords", kb.stopwords, "Stopword list, one per line");
  c_ingest->add_option("--prefix", kb.prefix, "Keep only labels with this prefix (stripped)");
  c_ingest->add_option("--out", kb.out, "Output embedding file")->required();
  auto* c_graph = c_kb->add_subcommand("embed-graph", "Embed a triple file with a translational model");
  c_graph->add_option("--triples", kb.triples, "Triple file (head<TAB>relation<TAB>tail)")->required();
  c_graph->add_option("--dim", kb.graph.dim, "Embedding dimension");
  c_graph->add_option("--epochs", kb.graph.epochs, "Training epochs");
  c_graph->add_option("--lr", kb.graph.learning_rate, "Learning rate");
  c_graph->add_option("--margin", kb.graph.margin, "Ranking margin");
  c_graph->add_option("--seed", kb.graph.seed, "Random seed");
  c_graph->add_option("--out", kb.out, "Output embedding file")->required();
  auto* c_build = c_kb->add_subcommand("build-index", "Build the binary knowledge index");
  c_build->add_option("--embeddings", kb.embeddings, "Embedding file")->required();
  c_build->add_option("--dim", kb.dim, "Vector dimension")->required();
  c_build->add_option("--vocab", kb.vocab, "Vocabulary file")->required();
  c_build->add_option("--out", kb.out, "Output index file")->required();

  MatchArgs mt;
  auto* c_match = app.add_subcommand("match", "Find knowledge-rich expressions in text");
  c_match->add_option("--index", mt.index, "Index file")->required();
  c_match->add_option("--vocab", mt.vocab, "Vocabulary file")->required();
  c_match->add_option("--input", mt.input, "Text file, one sentence per line")->required();
  c_match->add_option("--max-len", mt.max_len, "Truncate sentences to this many tokens (0 = unbounded)");
  c_match->add_option("--out", mt.out, "Output file (default stdout)");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Run a training strategy and write a report");
  c_train->add_option("--config", tr.config, "JSON config file");
  c_train->add_option("--strategy", tr.strategy, "baseline, pt, ft or pt+ft");
  c_train->add_option("--lambda", tr.lambda, "Alignment weight");
  c_train->add_option("--seed", tr.seed, "Random seed");
  c_train->add_option("--pretrain-epochs", tr.pretrain_epochs, "Pretraining epochs");
  c_train->add_option("--finetune-epochs", tr.finetune_epochs, "Fine-tuning epochs");
  c_train->add_flag("--text-only", tr.text_only, "Disable the visual stream");
  c_train->add_option("--vocab", tr.vocab, "Vocabulary file");
  c_train->add_option("--index", tr.index, "Index file");
  c_train->add_option("--corpus", tr.corpus, "Pretraining corpus, one sentence per line");
  c_train->add_option("--task-train", tr.task_train, "Task training examples (JSONL)");
  c_train->add_option("--task-test", tr.task_test, "Task test examples (JSONL)");
  c_train->add_option("--head", tr.head, "classification or binary");
  c_train->add_option("--out", tr.out, "Output directory");

  AnalyzeArgs an;
  auto* c_an = app.add_subcommand("analyze", "Post-training diagnostics");
  c_an->require_subcommand(1);
  auto add_model = [&](CLI::App* c) {
    c->add_option("--checkpoint", an.checkpoint, "Checkpoint file")->required();
    c->add_option("--vocab", an.vocab, "Vocabulary file")->required();
    c->add_option("--format", an.format, "json or csv");
    c->add_option("--out", an.out, "Output file (default stdout)");
  };
  auto* c_nb = c_an->add_subcommand("neighbors", "Nearest neighbors in word-embedding space");
  add_model(c_nb);
  c_nb->add_option("--word", an.words, "Query word (repeatable)")->required();
  c_nb->add_option("-k", an.k, "Number of neighbors");
  c_nb->add_option("--metric", an.metric, "l2 or cosine");
  auto* c_ab = c_an->add_subcommand("ablate", "Remove entities matching keywords from an index");
  c_ab->add_option("--index", an.index, "Index file")->required();
  c_ab->add_option("--keywords", an.keywords, "Keyword list, one per line")->required();
  c_ab->add_option("--out", an.out, "Output index file")->required();
  auto* c_syn = c_an->add_subcommand("synonyms", "Related-pair versus random-pair embedding distances");
  add_model(c_syn);
  c_syn->add_option("--pairs", an.pairs, "Word pair file, two words per line")->required();
  c_syn->add_option("--control", an.control, "Number of random control pairs");
  c_syn->add_option("--seed", an.seed, "Random seed");
  auto* c_pr = c_an->add_subcommand("probe", "Linear probes on pooled layer representations");
  add_model(c_pr);
  c_pr->add_option("--task", an.task, "wc or sentlen");
  c_pr->add_option("--sentences", an.sentences, "Sentence file")->required();
  c_pr->add_option("--targets", an.targets, "Target words for wc");
  c_pr->add_option("--layers", an.layers, "all or comma-separated layer indices");
  c_pr->add_option("--buckets", an.buckets, "Length buckets for sentlen");
  c_pr->add_option("--seed", an.seed, "Split seed");
  c_pr->add_flag("--shuffle-labels", an.shuffle_labels, "Control run with permuted labels");

  ReportArgs rp;
  auto* c_rep = app.add_subcommand("report", "Aggregate run reports (mean ± std per strategy)");
  c_rep->add_option("--runs", rp.runs, "Directory searched for report.json files")->required();
  c_rep->add_flag("--force", rp.force, "Aggregate runs from different experiments");
  c_rep->add_option("--format", rp.format, "table, csv or json");
  c_rep->add_option("--json", rp.json_out, "Also write the summary as JSON");

  if (!args.empty() && !args[0].starts_with("-")) {
    const auto subs = app.get_subcommands([](const CLI::App*) { return true; });
    const bool known = std::any_of(subs.begin(), subs.end(), [&](const CLI::App* c) { return c->get_name() == args[0]; });
    if (!known) {
      err << "error: unknown subcommand '" << args[0] << "'\n\n" << app.help();
      return kExitUsage;
    }
  }
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (c_tok->parsed()) {
      cmd_tokenize(tok, out);
    } else if (c_ingest->parsed()) {
      cmd_kb_ingest(kb, out);
    } else if (c_graph->parsed()) {
      cmd_kb_embed_graph(kb, out);
    } else if (c_build->parsed()) {
      cmd_kb_build_index(kb, out);
    } else if (c_match->parsed()) {
      cmd_match(mt, out);
    } else if (c_train->parsed()) {
      cmd_train(tr, out);
    } else if (c_nb->parsed()) {
      cmd_neighbors(an, out);
    } else if (c_ab->parsed()) {
      cmd_ablate(an, out);
    } else if (c_syn->parsed()) {
      cmd_synonyms(an, out);
    } else if (c_pr->parsed()) {
      cmd_probe(an, out);
    } else if (c_rep->parsed()) {
      cmd_report(rp, out);
    }
  } catch (const Error& e) {
    err << "error [" << error_kind_name(e.kind()) << "]: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "error [io]: " << e.what() << '\n';
    return exit_code(ErrorKind::Io);
  } catch (const json::exception& e) {
    err << "error [parse]: " << e.what() << '\n';
    return exit_code(ErrorKind::Parse);
  }
  return kExitOk;
}

}  // namespace kbalign
