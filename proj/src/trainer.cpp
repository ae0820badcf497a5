#include "kbalign/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <omp.h>

#include "kbalign/checkpoint.hpp"

namespace kbalign {

using nlohmann::json;

std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Baseline: return "baseline";
    case Strategy::PT: return "pt";
    case Strategy::FT: return "ft";
    case Strategy::PT_FT: return "pt+ft";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  std::string s(name);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "baseline") return Strategy::Baseline;
  if (s == "pt") return Strategy::PT;
  if (s == "ft") return Strategy::FT;
  if (s == "pt+ft" || s == "pt_ft" || s == "ptft") return Strategy::PT_FT;
  throw Error(ErrorKind::InvalidArgument, "unknown strategy '" + std::string(name) + "'");
}

bool aligns_in_pretraining(Strategy s) noexcept { return s == Strategy::PT || s == Strategy::PT_FT; }
bool aligns_in_finetuning(Strategy s) noexcept { return s == Strategy::FT || s == Strategy::PT_FT; }

// ---------------------------------------------------------------------------
// Configuration

namespace {

json model_to_json(const ModelConfig& m) {
  return {{"vocab_size", m.vocab_size}, {"d_e", m.d_e},
          {"d_v", m.d_v},               {"text_layers", m.text_layers},
          {"cross_layers", m.cross_layers}, {"heads", m.heads},
          {"ffn_dim", m.ffn_dim},       {"max_text_len", m.max_text_len},
          {"visual_dim", m.visual_dim}, {"num_answers", m.num_answers},
          {"text_only", m.text_only}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.vocab_size = j.value("vocab_size", m.vocab_size);
  m.d_e = j.value("d_e", m.d_e);
  m.d_v = j.value("d_v", m.d_v);
  m.text_layers = j.value("text_layers", m.text_layers);
  m.cross_layers = j.value("cross_layers", m.cross_layers);
  m.heads = j.value("heads", m.heads);
  m.ffn_dim = j.value("ffn_dim", m.ffn_dim);
  m.max_text_len = j.value("max_text_len", m.max_text_len);
  m.visual_dim = j.value("visual_dim", m.visual_dim);
  m.num_answers = j.value("num_answers", m.num_answers);
  m.text_only = j.value("text_only", m.text_only);
  return m;
}

template <class T>
std::optional<T> optional_field(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<T>();
}

}  // namespace

void TrainConfig::validate() const {
  auto nonneg = [](double v, const char* what) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw Error(ErrorKind::InvalidArgument, std::string(what) + " must be a non-negative number");
    }
  };
  nonneg(lambda, "lambda");
  if (pretrain_lambda) nonneg(*pretrain_lambda, "pretrain_lambda");
  if (finetune_lambda) nonneg(*finetune_lambda, "finetune_lambda");
  if (batch_size == 0) throw Error(ErrorKind::InvalidArgument, "batch_size must be positive");
  if (!(learning_rate > 0.0)) throw Error(ErrorKind::InvalidArgument, "learning_rate must be positive");
  if (finetune_learning_rate && !(*finetune_learning_rate > 0.0)) {
    throw Error(ErrorKind::InvalidArgument, "finetune_learning_rate must be positive");
  }
  if (!(mask_probability > 0.0 && mask_probability <= 1.0)) {
    throw Error(ErrorKind::InvalidArgument, "mask_probability must be in (0, 1]");
  }
  if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) {
    throw Error(ErrorKind::InvalidArgument, "heldout_fraction must be in [0, 1)");
  }
  model.validate();
}

double TrainConfig::phase_lambda(bool pretraining) const {
  const bool enabled = pretraining ? aligns_in_pretraining(strategy) : aligns_in_finetuning(strategy);
  if (!enabled) return 0.0;
  const auto& override_value = pretraining ? pretrain_lambda : finetune_lambda;
  return override_value.value_or(lambda);
}

json TrainConfig::to_json() const {
  json j = {{"strategy", strategy_name(strategy)},
            {"lambda", lambda},
            {"pretrain_lambda", pretrain_lambda ? json(*pretrain_lambda) : json(nullptr)},
            {"finetune_lambda", finetune_lambda ? json(*finetune_lambda) : json(nullptr)},
            {"variant", alignment_variant_name(variant)},
            {"seed", seed},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"finetune_learning_rate",
             finetune_learning_rate ? json(*finetune_learning_rate) : json(nullptr)},
            {"pretrain_epochs", pretrain_epochs},
            {"finetune_epochs", finetune_epochs},
            {"optimizer", optimizer_name(optimizer)},
            {"mask_probability", mask_probability},
            {"heldout_fraction", heldout_fraction},
            {"model", model_to_json(model)}};
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  try {
    if (j.contains("strategy")) c.strategy = parse_strategy(j.at("strategy").get<std::string>());
    c.lambda = j.value("lambda", c.lambda);
    c.pretrain_lambda = optional_field<double>(j, "pretrain_lambda");
    c.finetune_lambda = optional_field<double>(j, "finetune_lambda");
    if (j.contains("variant")) c.variant = parse_alignment_variant(j.at("variant").get<std::string>());
    c.seed = j.value("seed", c.seed);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.finetune_learning_rate = optional_field<double>(j, "finetune_learning_rate");
    c.pretrain_epochs = j.value("pretrain_epochs", c.pretrain_epochs);
    c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
    if (j.contains("optimizer")) c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
    c.mask_probability = j.value("mask_probability", c.mask_probability);
    c.heldout_fraction = j.value("heldout_fraction", c.heldout_fraction);
    if (j.contains("model")) c.model = model_from_json(j.at("model"));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::InvalidArgument, std::string("invalid training config: ") + e.what());
  }
  return c;
}

Fingerprint TrainConfig::fingerprint() const { return Hasher().str(to_json().dump()).value(); }

Fingerprint TrainConfig::experiment_fingerprint() const {
  json j = to_json();
  for (const char* key : {"seed", "strategy", "lambda", "pretrain_lambda", "finetune_lambda"}) j.erase(key);
  return Hasher().str(j.dump()).value();
}

// ---------------------------------------------------------------------------
// Data

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

Corpus tokenize_corpus(std::span<const std::string> lines, const SubwordVocabulary& vocab,
                       std::size_t max_tokens) {
  Corpus c;
  c.sentences.reserve(lines.size());
  Hasher h;
  h.u64(vocab.fingerprint()).u64(max_tokens);
  for (const auto& line : lines) {
    auto seq = tokenize(line, vocab, max_tokens);
    h.u64(seq.ids.size()).bytes(seq.ids.data(), seq.ids.size() * sizeof(TokenId));
    c.sentences.push_back(std::move(seq));
  }
  c.fingerprint = h.value();
  return c;
}

std::size_t TaskData::label_of(const std::string& answer) const {
  if (head == HeadKind::Binary) {
    if (answer == "1" || answer == "true" || answer == "yes") return 1;
    if (answer == "0" || answer == "false" || answer == "no") return 0;
    throw Error(ErrorKind::InvalidArgument, "binary answer must be true/false, yes/no or 1/0, got '" + answer + "'");
  }
  auto it = std::lower_bound(answers.begin(), answers.end(), answer);
  if (it == answers.end() || *it != answer) {
    throw Error(ErrorKind::InvalidArgument, "unknown answer '" + answer + "'");
  }
  return static_cast<std::size_t>(it - answers.begin());
}

Fingerprint TaskData::fingerprint() const {
  Hasher h;
  h.str(head_kind_name(head));
  for (const auto& a : answers) h.str(a);
  for (const auto* split : {&train, &test}) {
    h.u64(split->size());
    for (const auto& e : *split) {
      h.str(e.text).str(e.answer).u64(e.visual_rows);
      for (const auto& t : e.tags) h.str(t);
      h.bytes(e.visual.data(), e.visual.size() * sizeof(float));
    }
  }
  return h.value();
}

std::vector<TaskExample> load_task_examples(const std::filesystem::path& jsonl) {
  std::ifstream in(jsonl);
  if (!in) throw Error(ErrorKind::Io, "cannot open task file " + jsonl.string());
  std::vector<TaskExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      TaskExample e;
      e.text = j.at("question").get<std::string>();
      e.answer = j.at("answer").get<std::string>();
      if (j.contains("tags")) e.tags = j.at("tags").get<std::vector<std::string>>();
      if (j.contains("visual")) {
        const auto rows = j.at("visual").get<std::vector<std::vector<float>>>();
        e.visual_rows = rows.size();
        for (const auto& r : rows) {
          if (!rows.empty() && r.size() != rows.front().size()) {
            throw Error(ErrorKind::Parse, "ragged visual feature rows");
          }
          e.visual.insert(e.visual.end(), r.begin(), r.end());
        }
      }
      out.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw Error(ErrorKind::Parse, jsonl.string() + ":" + std::to_string(line_no) + ": " + ex.what());
    }
  }
  return out;
}

void write_task_examples(std::ostream& out, std::span<const TaskExample> examples) {
  for (const auto& e : examples) {
    json j = {{"question", e.text}, {"answer", e.answer}, {"tags", e.tags}};
    if (e.visual_rows > 0) {
      const std::size_t cols = e.visual.size() / e.visual_rows;
      json rows = json::array();
      for (std::size_t r = 0; r < e.visual_rows; ++r) {
        rows.push_back(std::vector<float>(e.visual.begin() + r * cols, e.visual.begin() + (r + 1) * cols));
      }
      j["visual"] = std::move(rows);
    }
    out << j.dump() << '\n';
  }
}

TaskData make_task_data(std::vector<TaskExample> train, std::vector<TaskExample> test, HeadKind head) {
  if (head == HeadKind::MaskedToken) {
    throw Error(ErrorKind::InvalidArgument, "task head must be classification or binary");
  }
  TaskData t;
  t.head = head;
  if (head == HeadKind::Binary) {
    t.answers = {"false", "true"};
  } else {
    for (const auto* split : {&train, &test}) {
      for (const auto& e : *split) t.answers.push_back(e.answer);
    }
    std::sort(t.answers.begin(), t.answers.end());
    t.answers.erase(std::unique(t.answers.begin(), t.answers.end()), t.answers.end());
  }
  t.train = std::move(train);
  t.test = std::move(test);
  for (const auto* split : {&t.train, &t.test}) {
    for (const auto& e : *split) (void)t.label_of(e.answer);
  }
  return t;
}

const CorpusMatches& MatchCache::get(std::span<const TokenSequence> sentences, Fingerprint sentences_fp,
                                     const KnowledgeIndex& index) {
  const auto key = std::make_pair(sentences_fp, index.fingerprint());
  auto it = cache_.find(key);
  if (it != cache_.end()) {
    ++hits_;
    return it->second;
  }
  ++misses_;
  return cache_.emplace(key, parallel::match_corpus(sentences, index)).first->second;
}

// ---------------------------------------------------------------------------
// Checkpoints

void Checkpoint::save(const std::filesystem::path& path) const {
  TensorFile f;
  f.header = {{"kind", "kbalign-checkpoint"},
              {"model", model_to_json(model)},
              {"model_fingerprint", fingerprint_hex(model_fingerprint)},
              {"vocab_fingerprint", fingerprint_hex(vocab_fingerprint)},
              {"kb_fingerprint", fingerprint_hex(kb_fingerprint)},
              {"projection", {{"d_e", projection.d_e}, {"d_v", projection.d_v}}},
              {"optimizer",
               {{"kind", optimizer_name(model_optimizer.settings().kind)},
                {"learning_rate", model_optimizer.settings().learning_rate},
                {"projection_learning_rate", projection_optimizer.settings().learning_rate},
                {"model_steps", model_optimizer.steps()},
                {"projection_steps", projection_optimizer.steps()}}}};
  const Encoder<float> enc(model);
  for (const auto& t : enc.layout().tensors()) {
    f.tensors.emplace("model/" + t.name,
                      std::vector<float>(params.begin() + static_cast<std::ptrdiff_t>(t.offset),
                                         params.begin() + static_cast<std::ptrdiff_t>(t.offset + t.size())));
  }
  f.tensors.emplace("projection/weight", projection.weight);
  f.tensors.emplace("projection/bias", projection.bias);
  f.tensors.emplace("optimizer/model/m", model_optimizer.first_moment());
  f.tensors.emplace("optimizer/model/v", model_optimizer.second_moment());
  f.tensors.emplace("optimizer/projection/m", projection_optimizer.first_moment());
  f.tensors.emplace("optimizer/projection/v", projection_optimizer.second_moment());
  f.save(path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  const TensorFile f = TensorFile::load(path);
  Checkpoint c;
  try {
    if (f.header.at("kind") != "kbalign-checkpoint") throw Error(ErrorKind::Parse, "not a checkpoint");
    c.model = model_from_json(f.header.at("model"));
    c.model_fingerprint = parse_fingerprint_hex(f.header.at("model_fingerprint").get<std::string>());
    c.vocab_fingerprint = parse_fingerprint_hex(f.header.at("vocab_fingerprint").get<std::string>());
    c.kb_fingerprint = parse_fingerprint_hex(f.header.at("kb_fingerprint").get<std::string>());
    if (c.model.fingerprint() != c.model_fingerprint) {
      throw Error(ErrorKind::Fingerprint, "checkpoint model header does not match its fingerprint");
    }
    const Encoder<float> enc(c.model);
    c.params.resize(enc.param_count());
    for (const auto& t : enc.layout().tensors()) {
      const auto& data = f.tensor("model/" + t.name);
      if (data.size() != t.size()) throw Error(ErrorKind::Parse, "tensor '" + t.name + "' has wrong size");
      std::copy(data.begin(), data.end(), c.params.begin() + static_cast<std::ptrdiff_t>(t.offset));
    }
    const auto& opt = f.header.at("optimizer");
    OptimizerSettings settings;
    settings.kind = parse_optimizer(opt.at("kind").get<std::string>());
    settings.learning_rate = opt.at("learning_rate").get<double>();
    c.projection.d_e = f.header.at("projection").at("d_e").get<std::size_t>();
    c.projection.d_v = f.header.at("projection").at("d_v").get<std::size_t>();
    c.projection.weight = f.tensor("projection/weight");
    c.projection.bias = f.tensor("projection/bias");
    c.model_optimizer = Optimizer(settings, c.params.size());
    c.model_optimizer.restore(opt.at("model_steps").get<std::uint64_t>(), f.tensor("optimizer/model/m"),
                              f.tensor("optimizer/model/v"));
    settings.learning_rate = opt.at("projection_learning_rate").get<double>();
    c.projection_optimizer = Optimizer(settings, c.projection.weight.size() + c.projection.bias.size());
    c.projection_optimizer.restore(opt.at("projection_steps").get<std::uint64_t>(),
                                   f.tensor("optimizer/projection/m"), f.tensor("optimizer/projection/v"));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Parse, std::string("corrupt checkpoint header: ") + e.what());
  }
  return c;
}

Checkpoint initial_checkpoint(const TrainConfig& config, const SubwordVocabulary& vocab,
                              const KnowledgeIndex& index) {
  config.validate();
  if (config.model.vocab_size != vocab.size()) {
    throw Error(ErrorKind::InvalidArgument, "model vocab_size " + std::to_string(config.model.vocab_size) +
                                                " differs from vocabulary size " + std::to_string(vocab.size()));
  }
  if (!index.empty() && index.dim() != config.model.d_v) {
    throw Error(ErrorKind::InvalidArgument, "model d_v " + std::to_string(config.model.d_v) +
                                                " differs from knowledge dimension " + std::to_string(index.dim()));
  }
  Checkpoint c;
  c.model = config.model;
  const Encoder<float> enc(config.model);
  c.params = enc.init_params(derive_seed(config.seed, {0x6d6f64656cULL}));
  c.projection = Projection<float>::init(config.model.d_e, config.model.d_v,
                                         derive_seed(config.seed, {0x70726f6aULL}));
  OptimizerSettings settings{config.optimizer, config.learning_rate};
  c.model_optimizer = Optimizer(settings, c.params.size());
  c.projection_optimizer = Optimizer(settings, c.projection.weight.size() + c.projection.bias.size());
  c.model_fingerprint = config.model.fingerprint();
  c.vocab_fingerprint = vocab.fingerprint();
  c.kb_fingerprint = index.fingerprint();
  return c;
}

void check_compatible(const Checkpoint& ckpt, const TrainConfig& config, const SubwordVocabulary& vocab,
                      const KnowledgeIndex& index) {
  if (ckpt.model_fingerprint != config.model.fingerprint()) {
    throw Error(ErrorKind::Fingerprint, "checkpoint model configuration " + fingerprint_hex(ckpt.model_fingerprint) +
                                            " does not match run configuration " +
                                            fingerprint_hex(config.model.fingerprint()));
  }
  if (ckpt.vocab_fingerprint != vocab.fingerprint()) {
    throw Error(ErrorKind::Fingerprint, "checkpoint vocabulary " + fingerprint_hex(ckpt.vocab_fingerprint) +
                                            " does not match " + fingerprint_hex(vocab.fingerprint()));
  }
  if (ckpt.kb_fingerprint != index.fingerprint()) {
    throw Error(ErrorKind::Fingerprint, "checkpoint knowledge index " + fingerprint_hex(ckpt.kb_fingerprint) +
                                            " does not match " + fingerprint_hex(index.fingerprint()));
  }
}

// ---------------------------------------------------------------------------
// Training

namespace {

constexpr std::uint64_t kPretrainTag = 1;
constexpr std::uint64_t kFinetuneTag = 2;
constexpr std::uint64_t kHeldoutMaskEpoch = ~0ULL;

struct Prepared {
  std::vector<TokenId> ids;       // [CLS] text [SEP]
  std::vector<MatchSpan> spans;   // positions within ids
  std::size_t label = 0;
  const TaskExample* source = nullptr;
};

Prepared prepare(const TokenSequence& seq, std::span<const MatchSpan> spans, const SubwordVocabulary& vocab) {
  Prepared p;
  const std::size_t shift = vocab.cls_id() ? 1 : 0;
  if (vocab.cls_id()) p.ids.push_back(*vocab.cls_id());
  p.ids.insert(p.ids.end(), seq.ids.begin(), seq.ids.end());
  if (vocab.sep_id()) p.ids.push_back(*vocab.sep_id());
  for (const auto& s : spans) p.spans.push_back({s.start + shift, s.end + shift, s.entry});
  return p;
}

std::size_t text_budget(const ModelConfig& m, const SubwordVocabulary& vocab) {
  const std::size_t reserved = (vocab.cls_id() ? 1 : 0) + (vocab.sep_id() ? 1 : 0);
  if (m.max_text_len <= reserved) throw Error(ErrorKind::InvalidArgument, "max_text_len too small");
  return m.max_text_len - reserved;
}

std::vector<TokenSequence> tokenize_questions(std::span<const TaskExample> examples,
                                              const SubwordVocabulary& vocab, std::size_t budget,
                                              Fingerprint& fp) {
  std::vector<TokenSequence> out;
  out.reserve(examples.size());
  Hasher h;
  h.str("questions").u64(vocab.fingerprint()).u64(budget);
  for (const auto& e : examples) {
    out.push_back(tokenize(e.text, vocab, budget));
    h.str(e.text);
  }
  fp = h.value();
  return out;
}

struct Scratch {
  ForwardState<float> state;
  std::vector<float> grads;
  std::vector<float> proj_w, proj_b;
  std::vector<float> logits, d_logits, d_hidden, d_pooled, c, dc;
  std::vector<std::size_t> positions, targets;
  std::vector<TokenId> input;
};

struct ExampleLoss {
  double main = 0.0;
  double align = 0.0;
  std::size_t matches = 0;
  std::size_t prediction = 0;
};

struct StepContext {
  const Encoder<float>& encoder;
  const SubwordVocabulary& vocab;
  const KnowledgeIndex& index;
  const TrainConfig& config;
  bool masked_lm = false;
  HeadKind head = HeadKind::Classification;
  bool align = false;
  float lambda = 0.0f;
};

// Forward (and optionally backward) of one example. Gradients land in
// s.grads / s.proj_* scaled for a batch of `batch` examples.
ExampleLoss run_example(const StepContext& ctx, std::span<const float> params, const Projection<float>& proj,
                        const Prepared& ex, std::uint64_t mask_seed, std::size_t batch, bool backward,
                        Scratch& s) {
  ExampleLoss out;
  const auto& vocab = ctx.vocab;
  const std::size_t d = ctx.encoder.config().d_e;
  s.input = ex.ids;
  s.positions.clear();
  s.targets.clear();

  if (ctx.masked_lm) {
    if (!vocab.mask_id()) throw Error(ErrorKind::InvalidArgument, "masked-token objective needs [MASK]");
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < ex.ids.size(); ++i) {
      if (!vocab.is_structural(ex.ids[i])) candidates.push_back(i);
    }
    std::mt19937_64 rng(mask_seed);
    std::bernoulli_distribution pick(ctx.config.mask_probability);
    for (std::size_t i : candidates) {
      if (pick(rng)) s.positions.push_back(i);
    }
    if (s.positions.empty() && !candidates.empty()) {
      s.positions.push_back(candidates[std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng)]);
    }
    for (std::size_t i : s.positions) {
      s.targets.push_back(static_cast<std::size_t>(ex.ids[i]));
      s.input[i] = *vocab.mask_id();
    }
  }

  ExampleInput<float> in;
  in.ids = s.input;
  if (ex.source) {
    in.visual = ex.source->visual;
    in.visual_rows = ex.source->visual_rows;
  }
  ctx.encoder.forward(params, in, vocab.pad_id(), s.state);

  const float inv_batch = 1.0f / float(batch);
  const std::size_t n = s.input.size();
  if (backward) {
    s.d_hidden.assign(n * d, 0.0f);
    s.d_pooled.assign(d, 0.0f);
  }
  bool have_main_grad = false;
  if (ctx.masked_lm) {
    if (!s.positions.empty()) {
      const std::size_t V = ctx.encoder.config().vocab_size;
      s.logits.resize(s.positions.size() * V);
      ctx.encoder.mlm_logits(params, s.state, s.positions, s.logits);
      MatrixView<float> g{};
      if (backward) {
        s.d_logits.assign(s.logits.size(), 0.0f);
        g = {s.d_logits.data(), s.positions.size(), V};
      }
      out.main = main_loss<float>({s.logits.data(), s.positions.size(), V}, s.targets, HeadKind::MaskedToken, g);
      if (backward) {
        for (auto& v : s.d_logits) v *= inv_batch;
        ctx.encoder.mlm_backward(params, s.state, s.positions, s.d_logits, s.d_hidden, s.grads);
        have_main_grad = true;
      }
    }
  } else if (ctx.head == HeadKind::Binary) {
    const float logit = ctx.encoder.binary_logit(params, s.state);
    float g = 0.0f;
    out.main = binary_cross_entropy_with_logit(logit, static_cast<int>(ex.label), &g);
    out.prediction = logit > 0.0f ? 1 : 0;
    if (backward) {
      ctx.encoder.binary_backward(params, s.state, g * inv_batch, s.d_pooled, s.grads);
      have_main_grad = true;
    }
  } else {
    const std::size_t K = ctx.encoder.config().num_answers;
    s.logits.resize(K);
    ctx.encoder.classifier_logits(params, s.state, s.logits);
    s.d_logits.assign(K, 0.0f);
    out.main = softmax_cross_entropy<float>(s.logits, ex.label, backward ? std::span<float>(s.d_logits) : std::span<float>{});
    out.prediction = static_cast<std::size_t>(std::max_element(s.logits.begin(), s.logits.end()) - s.logits.begin());
    if (backward) {
      for (auto& v : s.d_logits) v *= inv_batch;
      ctx.encoder.classifier_backward(params, s.state, s.d_logits, s.d_pooled, s.grads);
      have_main_grad = true;
    }
  }
  if (backward && have_main_grad) {
    ctx.encoder.backward(params, s.state, s.d_hidden, s.d_pooled, s.grads);
  }

  if (ctx.align && !ex.spans.empty()) {
    // Expression embeddings read the unmasked word-embedding rows.
    const auto table = ctx.encoder.word_embeddings(params);
    s.c.resize(d);
    s.dc.resize(d);
    for (const auto& span : ex.spans) {
      std::fill(s.c.begin(), s.c.end(), 0.0f);
      for (std::size_t i = span.start; i < span.end; ++i) {
        kernels::axpy(1.0f, table.row(static_cast<std::size_t>(ex.ids[i])), s.c.data(), d);
      }
      const auto& target = ctx.index.entry(span.entry).vector;
      out.align += alignment_pair<float>(s.c, target, proj, ctx.config.variant,
                                         backward ? std::span<float>(s.proj_w) : std::span<float>{},
                                         backward ? std::span<float>(s.proj_b) : std::span<float>{},
                                         backward ? std::span<float>(s.dc) : std::span<float>{});
      ++out.matches;
      if (backward) {
        float* g_table = s.grads.data() + ctx.encoder.word_embedding_offset();
        for (std::size_t i = span.start; i < span.end; ++i) {
          kernels::axpy(ctx.lambda, s.dc.data(), g_table + static_cast<std::size_t>(ex.ids[i]) * d, d);
        }
      }
    }
  }
  return out;
}

std::vector<float> flatten(const Projection<float>& p) {
  std::vector<float> flat(p.weight);
  flat.insert(flat.end(), p.bias.begin(), p.bias.end());
  return flat;
}

void unflatten(std::span<const float> flat, Projection<float>& p) {
  std::copy(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(p.weight.size()), p.weight.begin());
  std::copy(flat.begin() + static_cast<std::ptrdiff_t>(p.weight.size()), flat.end(), p.bias.begin());
}

void check_finite(double v, const std::string& phase, std::size_t epoch, std::size_t step,
                  double main, double align) {
  if (!std::isfinite(v)) {
    std::ostringstream msg;
    msg << "non-finite loss in " << phase << " (epoch " << epoch << ", step " << step
        << "): main=" << main << " align=" << align;
    throw Error(ErrorKind::Numeric, msg.str());
  }
}

struct EvalSums {
  double main = 0.0;
  double align = 0.0;
  std::size_t matches = 0;
  std::size_t correct = 0;
  std::vector<std::size_t> predictions;
};

EvalSums evaluate_examples(const StepContext& ctx, std::span<const float> params, const Projection<float>& proj,
                           std::span<const Prepared> examples, std::uint64_t mask_base) {
  EvalSums sums;
  sums.predictions.resize(examples.size());
  std::vector<ExampleLoss> results(examples.size());
  const auto n = static_cast<std::int64_t>(examples.size());
#pragma omp parallel
  {
    Scratch s;
#pragma omp for schedule(static)
    for (std::int64_t ii = 0; ii < n; ++ii) {
      const auto i = static_cast<std::size_t>(ii);
      results[i] = run_example(ctx, params, proj, examples[i], derive_seed(mask_base, {i}), 1, false, s);
    }
  }
  for (std::size_t i = 0; i < examples.size(); ++i) {
    sums.main += results[i].main;
    sums.align += results[i].align;
    sums.matches += results[i].matches;
    sums.predictions[i] = results[i].prediction;
    if (!ctx.masked_lm && results[i].prediction == examples[i].label) ++sums.correct;
  }
  return sums;
}

struct PhaseSpec {
  std::string name;
  std::uint64_t tag = 0;
  bool masked_lm = false;
  HeadKind head = HeadKind::Classification;
  bool align = false;
  double lambda = 0.0;
  double learning_rate = 0.0;
  std::size_t epochs = 0;
};

using EpochHook = std::function<void(EpochStats&, const Checkpoint&)>;

PhaseReport train_phase(const PhaseSpec& spec, std::span<const Prepared> train, Checkpoint& ckpt,
                        const KnowledgeIndex& index, const SubwordVocabulary& vocab, const TrainConfig& config,
                        const EpochHook& on_epoch) {
  const Encoder<float> encoder(ckpt.model);
  StepContext ctx{encoder, vocab, index, config, spec.masked_lm, spec.head, spec.align,
                  static_cast<float>(spec.lambda)};

  OptimizerSettings settings{config.optimizer, spec.learning_rate};
  ckpt.model_optimizer = Optimizer(settings, ckpt.params.size());
  const std::size_t proj_size = ckpt.projection.weight.size() + ckpt.projection.bias.size();
  ckpt.projection_optimizer = Optimizer(settings, proj_size);

  PhaseReport report;
  report.phase = spec.name;
  report.alignment = spec.align;
  report.lambda = spec.lambda;

  const std::size_t P = ckpt.params.size();
  std::vector<float> batch_grads(P), batch_proj(proj_size);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t B = config.batch_size;

  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    std::mt19937_64 shuffle_rng(derive_seed(config.seed, {spec.tag, 0x73687566ULL, epoch}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochStats stats;
    std::size_t batches = 0;
    for (std::size_t first = 0; first < order.size(); first += B) {
      const std::size_t last = std::min(order.size(), first + B);
      const std::size_t count = last - first;
      std::fill(batch_grads.begin(), batch_grads.end(), 0.0f);
      std::fill(batch_proj.begin(), batch_proj.end(), 0.0f);
      double main_sum = 0.0, align_sum = 0.0;
      std::size_t matches = 0;
      const std::span<const float> params = ckpt.params;

#pragma omp parallel
      {
        Scratch s;
        s.grads.resize(P);
        s.proj_w.resize(ckpt.projection.weight.size());
        s.proj_b.resize(ckpt.projection.bias.size());
#pragma omp for ordered schedule(static, 1)
        for (std::int64_t kk = 0; kk < static_cast<std::int64_t>(count); ++kk) {
          const std::size_t idx = order[first + static_cast<std::size_t>(kk)];
          std::fill(s.grads.begin(), s.grads.end(), 0.0f);
          std::fill(s.proj_w.begin(), s.proj_w.end(), 0.0f);
          std::fill(s.proj_b.begin(), s.proj_b.end(), 0.0f);
          const auto r = run_example(ctx, params, ckpt.projection, train[idx],
                                     derive_seed(config.seed, {spec.tag, epoch, idx}), count, true, s);
#pragma omp ordered
          {
            for (std::size_t i = 0; i < P; ++i) batch_grads[i] += s.grads[i];
            if (spec.align) {
              const std::size_t w = s.proj_w.size();
              for (std::size_t i = 0; i < w; ++i) batch_proj[i] += ctx.lambda * s.proj_w[i];
              for (std::size_t i = 0; i < s.proj_b.size(); ++i) batch_proj[w + i] += ctx.lambda * s.proj_b[i];
            }
            main_sum += r.main;
            align_sum += r.align;
            matches += r.matches;
          }
        }
      }

      const double main_mean = main_sum / double(count);
      const double total = combined_loss(main_mean, align_sum, spec.lambda);
      check_finite(total, spec.name, epoch, report.steps, main_mean, align_sum);

      ckpt.model_optimizer.step(ckpt.params, batch_grads);
      if (spec.align) {
        auto flat = flatten(ckpt.projection);
        ckpt.projection_optimizer.step(flat, batch_proj);
        unflatten(flat, ckpt.projection);
        ++report.projection_steps;
      }
      ++report.steps;
      ++batches;
      stats.main_loss += main_mean;
      stats.align_loss += align_sum;
      stats.total_loss += total;
      stats.matches += matches;
    }
    if (batches > 0) {
      stats.main_loss /= double(batches);
      stats.align_loss /= double(batches);
      stats.total_loss /= double(batches);
    }
    if (on_epoch) on_epoch(stats, ckpt);
    report.epochs.push_back(stats);
  }
  return report;
}

}  // namespace

PretrainResult pretrain(const Corpus& corpus, const KnowledgeIndex& index, const SubwordVocabulary& vocab,
                        const TrainConfig& config, Checkpoint start, MatchCache* cache) {
  config.validate();
  check_compatible(start, config, vocab, index);
  for (const auto& s : corpus.sentences) {
    if (s.vocab_fingerprint != vocab.fingerprint()) {
      throw Error(ErrorKind::Fingerprint, "corpus was tokenized with a different vocabulary");
    }
  }
  MatchCache local;
  MatchCache& mc = cache ? *cache : local;
  const CorpusMatches& matches = mc.get(corpus.sentences, corpus.fingerprint, index);

  std::vector<Prepared> all;
  all.reserve(corpus.sentences.size());
  for (std::size_t i = 0; i < corpus.sentences.size(); ++i) {
    all.push_back(prepare(corpus.sentences[i], matches[i], vocab));
  }
  // Held-out split for per-epoch diagnostics.
  std::vector<std::size_t> perm(all.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 split_rng(derive_seed(config.seed, {kPretrainTag, 0x68656c64ULL}));
  std::shuffle(perm.begin(), perm.end(), split_rng);
  const auto n_heldout = static_cast<std::size_t>(std::llround(config.heldout_fraction * double(all.size())));
  std::vector<bool> is_heldout(all.size(), false);
  for (std::size_t i = 0; i < n_heldout; ++i) is_heldout[perm[i]] = true;
  std::vector<Prepared> train, heldout;
  for (std::size_t i = 0; i < all.size(); ++i) (is_heldout[i] ? heldout : train).push_back(std::move(all[i]));

  PhaseSpec spec;
  spec.name = "pretrain";
  spec.tag = kPretrainTag;
  spec.masked_lm = true;
  spec.align = aligns_in_pretraining(config.strategy);
  spec.lambda = config.phase_lambda(true);
  spec.learning_rate = config.learning_rate;
  spec.epochs = config.pretrain_epochs;

  const Encoder<float> encoder(start.model);
  StepContext eval_ctx{encoder, vocab, index, config, true, HeadKind::MaskedToken, true, 0.0f};
  EpochHook hook = [&](EpochStats& stats, const Checkpoint& ckpt) {
    if (heldout.empty()) return;
    const auto sums = evaluate_examples(eval_ctx, ckpt.params, ckpt.projection, heldout,
                                        derive_seed(config.seed, {kPretrainTag, kHeldoutMaskEpoch}));
    stats.heldout_main = sums.main / double(heldout.size());
    stats.heldout_align = sums.matches > 0 ? sums.align / double(sums.matches) : 0.0;
  };

  PretrainResult result;
  result.checkpoint = std::move(start);
  result.report = train_phase(spec, train, result.checkpoint, index, vocab, config, hook);
  return result;
}

namespace {

std::vector<Prepared> prepare_task_split(std::span<const TaskExample> split, const TaskData& task,
                                         const SubwordVocabulary& vocab, const ModelConfig& model,
                                         const KnowledgeIndex* index, MatchCache* cache) {
  Fingerprint fp = 0;
  const auto seqs = tokenize_questions(split, vocab, text_budget(model, vocab), fp);
  static const CorpusMatches kNone;
  MatchCache local;
  const CorpusMatches* matches = &kNone;
  if (index) matches = &(cache ? *cache : local).get(seqs, fp, *index);
  std::vector<Prepared> out;
  out.reserve(split.size());
  for (std::size_t i = 0; i < split.size(); ++i) {
    auto p = prepare(seqs[i], index ? std::span<const MatchSpan>((*matches)[i]) : std::span<const MatchSpan>{}, vocab);
    p.label = task.label_of(split[i].answer);
    p.source = &split[i];
    out.push_back(std::move(p));
  }
  return out;
}

Metrics metrics_from(const TaskData& task, std::span<const Prepared> test, const EvalSums& sums) {
  Metrics m;
  m.count = test.size();
  m.accuracy = test.empty() ? 0.0 : double(sums.correct) / double(test.size());
  std::map<std::string, std::pair<std::size_t, std::size_t>> tally;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const bool ok = sums.predictions[i] == test[i].label;
    for (const auto& tag : task.test[i].tags) {
      auto& [correct, count] = tally[tag];
      correct += ok ? 1 : 0;
      ++count;
    }
  }
  for (const auto& [tag, cc] : tally) {
    m.by_tag[tag] = {double(cc.first) / double(cc.second), cc.second};
  }
  return m;
}

void check_task_fits(const TaskData& task, const ModelConfig& model) {
  if (task.head == HeadKind::Classification && task.answers.size() > model.num_answers) {
    throw Error(ErrorKind::InvalidArgument, "task has " + std::to_string(task.answers.size()) +
                                                " answers but the model head has " +
                                                std::to_string(model.num_answers));
  }
}

}  // namespace

Metrics evaluate(const TaskData& task, const Checkpoint& ckpt, const SubwordVocabulary& vocab) {
  check_task_fits(task, ckpt.model);
  const Encoder<float> encoder(ckpt.model);
  const auto test = prepare_task_split(task.test, task, vocab, ckpt.model, nullptr, nullptr);
  static const KnowledgeIndex kEmpty;
  TrainConfig cfg;
  StepContext ctx{encoder, vocab, kEmpty, cfg, false, task.head, false, 0.0f};
  const auto sums = evaluate_examples(ctx, ckpt.params, ckpt.projection, test, 0);
  return metrics_from(task, test, sums);
}

FinetuneResult finetune(const TaskData& task, Checkpoint start, const KnowledgeIndex& index,
                        const SubwordVocabulary& vocab, const TrainConfig& config, MatchCache* cache) {
  config.validate();
  check_compatible(start, config, vocab, index);
  check_task_fits(task, config.model);

  const auto train = prepare_task_split(task.train, task, vocab, config.model, &index, cache);
  const auto test = prepare_task_split(task.test, task, vocab, config.model, nullptr, nullptr);

  PhaseSpec spec;
  spec.name = "finetune";
  spec.tag = kFinetuneTag;
  spec.masked_lm = false;
  spec.head = task.head;
  spec.align = aligns_in_finetuning(config.strategy);
  spec.lambda = config.phase_lambda(false);
  spec.learning_rate = config.finetune_learning_rate.value_or(config.learning_rate);
  spec.epochs = config.finetune_epochs;

  const Encoder<float> encoder(start.model);
  StepContext eval_ctx{encoder, vocab, index, config, false, task.head, false, 0.0f};
  EpochHook hook = [&](EpochStats& stats, const Checkpoint& ckpt) {
    if (test.empty()) return;
    const auto sums = evaluate_examples(eval_ctx, ckpt.params, ckpt.projection, test, 0);
    stats.accuracy = double(sums.correct) / double(test.size());
  };

  FinetuneResult result;
  result.checkpoint = std::move(start);
  result.report = train_phase(spec, train, result.checkpoint, index, vocab, config, hook);
  const auto sums = evaluate_examples(eval_ctx, result.checkpoint.params, result.checkpoint.projection, test, 0);
  result.metrics = metrics_from(task, test, sums);
  return result;
}

json to_json(const PhaseReport& r) {
  json epochs = json::array();
  for (const auto& e : r.epochs) {
    json je = {{"main_loss", e.main_loss}, {"align_loss", e.align_loss},
               {"total_loss", e.total_loss}, {"matches", e.matches}};
    if (e.heldout_main) je["heldout_main_loss"] = *e.heldout_main;
    if (e.heldout_align) je["heldout_align_loss"] = *e.heldout_align;
    if (e.accuracy) je["accuracy"] = *e.accuracy;
    epochs.push_back(std::move(je));
  }
  return {{"phase", r.phase},
          {"alignment", r.alignment},
          {"lambda", r.lambda},
          {"steps", r.steps},
          {"projection_steps", r.projection_steps},
          {"epochs", std::move(epochs)}};
}

json to_json(const Metrics& m) {
  json tags = json::object();
  for (const auto& [tag, t] : m.by_tag) tags[tag] = {{"accuracy", t.accuracy}, {"count", t.count}};
  return {{"accuracy", m.accuracy}, {"count", m.count}, {"by_tag", std::move(tags)}};
}

RunResult run_strategy(const TrainConfig& config, const Corpus& corpus, const TaskData& task,
                       const KnowledgeIndex& index, const SubwordVocabulary& vocab, MatchCache* cache) {
  MatchCache local;
  MatchCache& mc = cache ? *cache : local;
  auto start = initial_checkpoint(config, vocab, index);
  auto pt = pretrain(corpus, index, vocab, config, std::move(start), &mc);
  auto ft = finetune(task, std::move(pt.checkpoint), index, vocab, config, &mc);

  RunResult result;
  result.phases = {pt.report, ft.report};
  result.metrics = ft.metrics;
  result.checkpoint = std::move(ft.checkpoint);

  const Fingerprint experiment = Hasher()
                                     .u64(config.experiment_fingerprint())
                                     .u64(vocab.fingerprint())
                                     .u64(index.fingerprint())
                                     .u64(corpus.fingerprint)
                                     .u64(task.fingerprint())
                                     .value();
  json phases = json::array();
  for (const auto& p : result.phases) phases.push_back(to_json(p));
  result.report = {{"kind", "kbalign-run"},
                   {"version", 1},
                   {"strategy", strategy_name(config.strategy)},
                   {"seed", config.seed},
                   {"lambda", config.lambda},
                   {"variant", alignment_variant_name(config.variant)},
                   {"config", config.to_json()},
                   {"config_fingerprint", fingerprint_hex(config.fingerprint())},
                   {"experiment_fingerprint", fingerprint_hex(experiment)},
                   {"inputs",
                    {{"vocab", fingerprint_hex(vocab.fingerprint())},
                     {"index", fingerprint_hex(index.fingerprint())},
                     {"index_entries", index.size()},
                     {"corpus", fingerprint_hex(corpus.fingerprint)},
                     {"task", fingerprint_hex(task.fingerprint())}}},
                   {"phases", std::move(phases)},
                   {"metrics", to_json(result.metrics)}};
  return result;
}

}  // namespace kbalign
