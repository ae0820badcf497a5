#include "kbalign/kb.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "kbalign/binary_io.hpp"

namespace kbalign {

namespace {

constexpr std::string_view kIndexMagic = "KBIDX\x01\x02\x03";
constexpr std::uint32_t kIndexVersion = 1;

std::vector<std::string_view> split_spaces(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && line[i] == ' ') ++i;
    if (i >= line.size()) break;
    std::size_t j = line.find(' ', i);
    if (j == std::string_view::npos) j = line.size();
    fields.push_back(line.substr(i, j - i));
    i = j;
  }
  return fields;
}

bool parse_unsigned(std::string_view s, std::size_t& out) {
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && p == s.data() + s.size();
}

std::string underscores_to_spaces(std::string s) {
  std::replace(s.begin(), s.end(), '_', ' ');
  return s;
}

std::string_view key_bytes(std::span<const TokenId> key) {
  return {reinterpret_cast<const char*>(key.data()), key.size() * sizeof(TokenId)};
}

}  // namespace

std::vector<KnowledgeEntry> parse_embeddings(std::istream& in, std::size_t dim) {
  if (dim == 0) throw Error(ErrorKind::InvalidArgument, "embedding dimension must be positive");
  std::vector<KnowledgeEntry> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_spaces(line);
    if (line_no == 1 && fields.size() == 2 && dim != 1 && line.front() != ' ') {
      std::size_t count = 0, header_dim = 0;
      if (parse_unsigned(fields[0], count) && parse_unsigned(fields[1], header_dim)) {
        if (header_dim != dim) {
          throw Error(ErrorKind::Parse, "line 1: header declares dimension " +
                                            std::to_string(header_dim) + ", expected " +
                                            std::to_string(dim));
        }
        continue;
      }
    }
    if (fields.empty() || line.front() == ' ') {
      throw Error(ErrorKind::Parse, "line " + std::to_string(line_no) + ": empty label");
    }
    if (fields.size() != dim + 1) {
      throw Error(ErrorKind::Parse, "line " + std::to_string(line_no) + ": expected " +
                                        std::to_string(dim) + " values, found " +
                                        std::to_string(fields.size() - 1));
    }
    KnowledgeEntry e;
    e.label = std::string(fields[0]);
    e.surface = underscores_to_spaces(e.label);
    e.vector.resize(dim);
    for (std::size_t k = 0; k < dim; ++k) {
      const auto f = fields[k + 1];
      float v = 0.0f;
      auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
      if (ec != std::errc{} || p != f.data() + f.size()) {
        throw Error(ErrorKind::Parse, "line " + std::to_string(line_no) + ": invalid number '" +
                                          std::string(f) + "'");
      }
      if (!std::isfinite(v)) {
        throw Error(ErrorKind::Parse,
                    "line " + std::to_string(line_no) + ": non-finite value '" + std::string(f) + "'");
      }
      e.vector[k] = v;
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

std::vector<KnowledgeEntry> ingest_embeddings(const std::filesystem::path& path, std::size_t dim) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open embedding file " + path.string());
  return parse_embeddings(in, dim);
}

void write_embeddings(std::ostream& out, std::span<const KnowledgeEntry> entries) {
  std::ostringstream line;
  line.imbue(std::locale::classic());
  for (const auto& e : entries) {
    line.str({});
    std::string label = e.label.empty() ? e.surface : e.label;
    std::replace(label.begin(), label.end(), ' ', '_');
    line << label;
    line << std::setprecision(9);
    for (float v : e.vector) line << ' ' << v;
    line << '\n';
    out << line.str();
  }
}

std::unordered_set<std::string> load_word_list(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open word list " + path.string());
  std::unordered_set<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) words.insert(line);
  }
  return words;
}

std::vector<KnowledgeEntry> filter_entries(std::vector<KnowledgeEntry> entries,
                                           const std::unordered_set<std::string>& stopwords,
                                           const std::optional<std::string>& keep_prefix) {
  std::vector<KnowledgeEntry> out;
  out.reserve(entries.size());
  for (auto& e : entries) {
    if (keep_prefix) {
      if (!e.label.starts_with(*keep_prefix)) continue;
      e.label.erase(0, keep_prefix->size());
      e.surface = underscores_to_spaces(e.label);
    }
    if (stopwords.contains(e.surface)) continue;
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------

std::uint32_t KnowledgeGraph::intern(std::vector<std::string>& names,
                                     std::unordered_map<std::string, std::uint32_t>& ids,
                                     const std::string& name) {
  auto [it, inserted] = ids.emplace(name, static_cast<std::uint32_t>(names.size()));
  if (inserted) names.push_back(name);
  return it->second;
}

bool KnowledgeGraph::add(const Triple& t) {
  if (t.head.empty() || t.relation.empty() || t.tail.empty()) {
    throw Error(ErrorKind::Parse, "triple with empty field");
  }
  IdTriple id{intern(entities_, entity_ids_, t.head), intern(relations_, relation_ids_, t.relation),
              intern(entities_, entity_ids_, t.tail)};
  if (!seen_.emplace(id.head, id.relation, id.tail).second) return false;
  triples_.push_back(id);
  return true;
}

KnowledgeGraph parse_triples(std::istream& in) {
  KnowledgeGraph g;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto a = line.find('\t');
    const auto b = a == std::string::npos ? a : line.find('\t', a + 1);
    if (b == std::string::npos || line.find('\t', b + 1) != std::string::npos) {
      throw Error(ErrorKind::Parse,
                  "line " + std::to_string(line_no) + ": expected head<TAB>relation<TAB>tail");
    }
    g.add({line.substr(0, a), line.substr(a + 1, b - a - 1), line.substr(b + 1)});
  }
  return g;
}

KnowledgeGraph load_triples(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open triple file " + path.string());
  return parse_triples(in);
}

// ---------------------------------------------------------------------------

void KnowledgeIndex::insert_keyed(KnowledgeEntry entry) {
  if (entry.vector.size() != dim_) {
    throw Error(ErrorKind::InvalidArgument,
                "dimension mismatch: entry '" + entry.surface + "' has " +
                    std::to_string(entry.vector.size()) + " values, index expects " +
                    std::to_string(dim_));
  }
  const auto bytes = key_bytes(entry.key);
  if (exact_.find(bytes) != exact_.end()) {
    ++stats_.collisions;
    return;
  }
  const auto id = static_cast<std::uint32_t>(entries_.size());
  exact_.emplace(std::string(bytes), id);
  for (std::size_t len = 1; len < entry.key.size(); ++len) {
    prefixes_.emplace(key_bytes(std::span(entry.key).first(len)));
  }
  entries_.push_back(std::move(entry));
}

void KnowledgeIndex::finalize() {
  std::sort(unmatchable_.begin(), unmatchable_.end());
  Hasher h;
  h.u64(dim_).u64(vocab_fingerprint_).u64(entries_.size());
  for (const auto& e : entries_) {
    h.str(e.surface);
    h.bytes(e.key.data(), e.key.size() * sizeof(TokenId));
    h.bytes(e.vector.data(), e.vector.size() * sizeof(float));
  }
  fingerprint_ = h.value();
}

KnowledgeIndex KnowledgeIndex::build(std::span<const KnowledgeEntry> entries,
                                     const SubwordVocabulary& vocab) {
  if (entries.empty()) throw Error(ErrorKind::InvalidArgument, "cannot build an empty index");
  KnowledgeIndex index;
  index.dim_ = entries.front().vector.size();
  index.vocab_fingerprint_ = vocab.fingerprint();
  index.unmatchable_ = vocab.structural_ids();
  index.stats_.input_entries = entries.size();
  index.exact_.reserve(entries.size());
  for (const auto& src : entries) {
    if (src.vector.size() != index.dim_) {
      throw Error(ErrorKind::InvalidArgument,
                  "dimension mismatch: entry '" + src.surface + "' has " +
                      std::to_string(src.vector.size()) + " values, expected " +
                      std::to_string(index.dim_));
    }
    KnowledgeEntry e = src;
    e.key = tokenize_unbounded(e.surface, vocab).ids;
    const bool all_unknown = std::all_of(e.key.begin(), e.key.end(),
                                         [&](TokenId id) { return id == vocab.unk_id(); });
    if (e.key.empty() || all_unknown) {
      ++index.stats_.dropped_unknown;
      continue;
    }
    index.insert_keyed(std::move(e));
  }
  index.finalize();
  return index;
}

KnowledgeIndex KnowledgeIndex::from_keyed(std::vector<KnowledgeEntry> entries, std::size_t dim,
                                          Fingerprint vocab_fingerprint,
                                          std::vector<TokenId> unmatchable) {
  KnowledgeIndex index;
  index.dim_ = dim;
  index.vocab_fingerprint_ = vocab_fingerprint;
  index.unmatchable_ = std::move(unmatchable);
  index.stats_.input_entries = entries.size();
  for (auto& e : entries) {
    if (e.key.empty()) throw Error(ErrorKind::InvalidArgument, "entry without key");
    index.insert_keyed(std::move(e));
  }
  index.finalize();
  return index;
}

std::optional<std::uint32_t> KnowledgeIndex::find(std::span<const TokenId> key) const {
  auto it = exact_.find(key_bytes(key));
  if (it == exact_.end()) return std::nullopt;
  return it->second;
}

bool KnowledgeIndex::is_proper_prefix(std::span<const TokenId> key) const {
  return prefixes_.find(key_bytes(key)) != prefixes_.end();
}

bool KnowledgeIndex::is_unmatchable(TokenId id) const noexcept {
  return std::binary_search(unmatchable_.begin(), unmatchable_.end(), id);
}

std::optional<KnowledgeIndex::Match> KnowledgeIndex::longest_match_at(
    std::span<const TokenId> tokens, std::size_t start) const {
  if (start >= tokens.size()) {
    throw Error(ErrorKind::InvalidArgument, "match start " + std::to_string(start) +
                                                " out of range for " +
                                                std::to_string(tokens.size()) + " tokens");
  }
  std::optional<Match> best;
  for (std::size_t len = 1; start + len <= tokens.size(); ++len) {
    if (is_unmatchable(tokens[start + len - 1])) break;
    const auto window = tokens.subspan(start, len);
    if (auto id = find(window)) best = Match{len, *id};
    if (!is_proper_prefix(window)) break;
  }
  return best;
}

void KnowledgeIndex::write(std::ostream& out) const {
  BinaryWriter w(out);
  w.raw(kIndexMagic.data(), kIndexMagic.size());
  w.u32(kIndexVersion);
  w.u64(dim_);
  w.u64(vocab_fingerprint_);
  w.vec<TokenId>(unmatchable_);
  w.u64(stats_.input_entries);
  w.u64(stats_.dropped_unknown);
  w.u64(stats_.collisions);
  w.u64(entries_.size());
  for (const auto& e : entries_) {
    w.str(e.label);
    w.str(e.surface);
    w.vec<TokenId>(e.key);
    w.raw(e.vector.data(), e.vector.size() * sizeof(float));
  }
  // Prefix table, sorted so the file is byte-stable.
  std::vector<std::string_view> prefixes(prefixes_.begin(), prefixes_.end());
  std::sort(prefixes.begin(), prefixes.end());
  w.u64(prefixes.size());
  for (auto p : prefixes) w.str(std::string(p));
  w.u64(fingerprint_);
}

KnowledgeIndex KnowledgeIndex::read(std::istream& in) {
  BinaryReader r(in);
  r.expect_magic(kIndexMagic, "knowledge index file");
  const auto version = r.u32();
  if (version != kIndexVersion) {
    throw Error(ErrorKind::Parse, "unsupported index version " + std::to_string(version));
  }
  KnowledgeIndex index;
  index.dim_ = r.u64();
  index.vocab_fingerprint_ = r.u64();
  index.unmatchable_ = r.vec<TokenId>();
  BuildStats stats;
  stats.input_entries = r.u64();
  stats.dropped_unknown = r.u64();
  stats.collisions = r.u64();
  const auto count = r.length();
  index.entries_.reserve(count);
  index.exact_.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    KnowledgeEntry e;
    e.label = r.str();
    e.surface = r.str();
    e.key = r.vec<TokenId>();
    e.vector.resize(index.dim_);
    r.raw(e.vector.data(), index.dim_ * sizeof(float));
    index.exact_.emplace(std::string(key_bytes(e.key)), static_cast<std::uint32_t>(i));
    index.entries_.push_back(std::move(e));
  }
  const auto n_prefix = r.length();
  index.prefixes_.reserve(n_prefix);
  for (std::uint64_t i = 0; i < n_prefix; ++i) index.prefixes_.insert(r.str());
  const Fingerprint stored = r.u64();
  index.finalize();
  index.stats_ = stats;
  if (stored != index.fingerprint_) {
    throw Error(ErrorKind::Fingerprint, "index file content does not match its fingerprint");
  }
  return index;
}

void KnowledgeIndex::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write index file " + path.string());
  write(out);
}

KnowledgeIndex KnowledgeIndex::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open index file " + path.string());
  return read(in);
}

}  // namespace kbalign
