#include "kbalign/toy_world.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>

namespace kbalign {

namespace {

const std::vector<std::string> kMentionTemplates = {
    "i saw the {} today",        "the {} is over there",      "we talked about the {}",
    "there is a {} in the box",  "my friend has a {}",        "look at that {}",
    "the {} was found yesterday", "she bought a {} last week", "nobody knows where the {} is",
    "he wrote a story about the {}"};

const std::vector<std::string> kQuestionTemplates = {"what color is the {} ?", "which color does the {} have ?"};

const std::vector<std::string> kProbeTemplates = {
    "the {} and the {} were here", "i saw a {} next to a {}", "we talked about the {} and a {}",
    "look at the {} near the {}"};

std::string fill(const std::string& tmpl, const std::string& a) {
  const auto pos = tmpl.find("{}");
  return tmpl.substr(0, pos) + a + tmpl.substr(pos + 2);
}

std::string fill(const std::string& tmpl, const std::string& a, const std::string& b) {
  return fill(fill(tmpl, a), b);
}

std::vector<std::string> words_of(const std::vector<std::string>& templates) {
  std::vector<std::string> out;
  for (const auto& t : templates) {
    std::size_t i = 0;
    while (i < t.size()) {
      const auto j = std::min(t.find(' ', i), t.size());
      const std::string w = t.substr(i, j - i);
      if (!w.empty() && w != "{}") out.push_back(w);
      i = j + 1;
    }
  }
  return out;
}

}  // namespace

ToyWorld make_toy_world(const ToyWorldOptions& o) {
  if (o.domains.empty() || o.attributes.size() < 2) {
    throw Error(ErrorKind::InvalidArgument, "toy world needs domains and at least two attributes");
  }
  const std::size_t per_cell = o.entities / (o.domains.size() * o.attributes.size());
  if (per_cell * o.domains.size() * o.attributes.size() != o.entities || per_cell < 2) {
    throw Error(ErrorKind::InvalidArgument, "entity count must split evenly over domains and attributes");
  }
  std::mt19937_64 rng(o.seed);
  ToyWorld w;

  std::set<std::string> reserved;
  for (const auto* list : {&kMentionTemplates, &kQuestionTemplates, &kProbeTemplates}) {
    for (auto& word : words_of(*list)) reserved.insert(word);
  }
  reserved.insert(o.domains.begin(), o.domains.end());
  reserved.insert(o.attributes.begin(), o.attributes.end());

  const std::string consonants = "bdfgklmnprstvz";
  const std::string vowels = "aeiou";
  std::set<std::string> names;
  auto pick = [&](const std::string& s) { return s[std::uniform_int_distribution<std::size_t>(0, s.size() - 1)(rng)]; };
  std::vector<std::string> name_list;
  while (name_list.size() < o.entities) {
    std::string n{pick(consonants), pick(vowels), pick(consonants), pick(vowels)};
    if (reserved.contains(n) || !names.insert(n).second) continue;
    name_list.push_back(n);
  }

  // Balanced attributes within each domain; split stratified by (domain, attribute).
  const auto n_train = static_cast<std::size_t>(std::llround(o.train_fraction * double(per_cell)));
  std::size_t next = 0;
  for (const auto& d : o.domains) {
    for (const auto& a : o.attributes) {
      for (std::size_t k = 0; k < per_cell; ++k) {
        w.entities.push_back({d, name_list[next++], a, k < n_train});
      }
    }
  }
  std::shuffle(w.entities.begin(), w.entities.end(), rng);

  for (const auto& e : w.entities) w.graph.add({e.surface(), "has_color", e.attribute});

  for (const auto& e : w.entities) {
    std::vector<std::size_t> t(kMentionTemplates.size());
    std::iota(t.begin(), t.end(), 0);
    std::shuffle(t.begin(), t.end(), rng);
    for (std::size_t m = 0; m < o.mentions_per_entity; ++m) {
      w.corpus.push_back(fill(kMentionTemplates[t[m % t.size()]], e.surface()));
    }
  }
  std::shuffle(w.corpus.begin(), w.corpus.end(), rng);

  for (const auto& e : w.entities) {
    for (const auto& q : kQuestionTemplates) {
      TaskExample ex;
      ex.text = fill(q, e.surface());
      ex.answer = e.attribute;
      ex.tags = {"domain:" + e.domain};
      (e.train ? w.train : w.test).push_back(std::move(ex));
    }
  }

  // Pairs of names sharing an attribute, one per entity.
  std::map<std::string, std::vector<std::string>> by_attr;
  for (const auto& e : w.entities) by_attr[e.attribute].push_back(e.name);
  for (const auto& [attr, group] : by_attr) {
    for (std::size_t i = 0; i + 1 < group.size(); i += 2) w.synonym_pairs.emplace_back(group[i], group[i + 1]);
  }

  const std::size_t n_targets = std::min(o.probe_targets, w.entities.size());
  for (std::size_t i = 0; i < n_targets; ++i) w.probe_targets.push_back(w.entities[i].name);
  std::uniform_int_distribution<std::size_t> other(n_targets, w.entities.size() - 1);
  std::uniform_int_distribution<std::size_t> tmpl(0, kProbeTemplates.size() - 1);
  for (std::size_t i = 0; i < n_targets; ++i) {
    for (std::size_t k = 0; k < o.probe_sentences_per_target; ++k) {
      const auto& filler = w.entities[other(rng)];
      const auto& target = w.entities[i];
      const bool first = k % 2 == 0;
      w.probe_sentences.push_back(fill(kProbeTemplates[tmpl(rng)], first ? target.surface() : filler.surface(),
                                       first ? filler.surface() : target.surface()));
    }
  }
  std::shuffle(w.probe_sentences.begin(), w.probe_sentences.end(), rng);

  w.vocab_tokens = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  std::set<std::string> seen(w.vocab_tokens.begin(), w.vocab_tokens.end());
  auto add = [&](const std::string& t) {
    if (seen.insert(t).second) w.vocab_tokens.push_back(t);
  };
  for (const auto& t : reserved) add(t);
  for (const auto& n : name_list) add(n);
  for (char c = 'a'; c <= 'z'; ++c) {
    add(std::string(1, c));
    add("##" + std::string(1, c));
  }
  return w;
}

void write_toy_world(const ToyWorld& w, const std::filesystem::path& dir, const std::string& ablation_domain) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + (dir / name).string());
    return out;
  };
  {
    auto out = open("vocab.txt");
    for (const auto& t : w.vocab_tokens) out << t << '\n';
  }
  {
    auto out = open("triples.tsv");
    for (const auto& e : w.entities) out << e.surface() << "\thas_color\t" << e.attribute << '\n';
  }
  {
    auto out = open("corpus.txt");
    for (const auto& s : w.corpus) out << s << '\n';
  }
  {
    auto out = open("task_train.jsonl");
    write_task_examples(out, w.train);
  }
  {
    auto out = open("task_test.jsonl");
    write_task_examples(out, w.test);
  }
  {
    auto out = open("pairs.txt");
    for (const auto& [a, b] : w.synonym_pairs) out << a << ' ' << b << '\n';
  }
  {
    auto out = open("probe_targets.txt");
    for (const auto& t : w.probe_targets) out << t << '\n';
  }
  {
    auto out = open("probe_sentences.txt");
    for (const auto& s : w.probe_sentences) out << s << '\n';
  }
  {
    auto out = open("keywords.txt");
    out << ablation_domain << '\n';
  }
}

GraphEmbeddingOptions toy_graph_options() {
  GraphEmbeddingOptions g;
  g.dim = 16;
  g.epochs = 300;
  g.learning_rate = 0.05;
  g.margin = 0.5;
  g.seed = 3;
  return g;
}

TrainConfig toy_train_config(std::size_t vocab_size, std::size_t d_v) {
  TrainConfig c;
  c.model.vocab_size = vocab_size;
  c.model.d_e = 32;
  c.model.d_v = d_v;
  c.model.text_layers = 2;
  c.model.cross_layers = 0;
  c.model.heads = 2;
  c.model.ffn_dim = 64;
  c.model.max_text_len = 16;
  c.model.num_answers = 5;
  c.model.text_only = true;
  c.batch_size = 16;
  c.learning_rate = 1e-3;
  c.pretrain_epochs = 20;
  c.finetune_epochs = 20;
  c.lambda = 1.0;
  return c;
}

}  // namespace kbalign
