#include "kbalign/tokenizer.hpp"

#include <fstream>

#include <unicode/locid.h>
#include <unicode/normalizer2.h>
#include <unicode/unistr.h>

namespace kbalign {

namespace {

bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool is_continuation_byte(unsigned char c) { return (c & 0xC0) == 0x80; }

// Byte offsets of code point starts, plus the end offset.
std::vector<std::size_t> code_point_boundaries(std::string_view word) {
  std::vector<std::size_t> b;
  b.reserve(word.size() + 1);
  for (std::size_t i = 0; i < word.size(); ++i) {
    if (!is_continuation_byte(static_cast<unsigned char>(word[i]))) b.push_back(i);
  }
  b.push_back(word.size());
  return b;
}

}  // namespace

SubwordVocabulary SubwordVocabulary::from_tokens(std::vector<std::string> tokens,
                                                 std::string continuation_prefix) {
  SubwordVocabulary v;
  v.continuation_ = std::move(continuation_prefix);
  v.ids_.reserve(tokens.size());
  Hasher h;
  h.str(v.continuation_);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto [it, inserted] = v.ids_.emplace(tokens[i], static_cast<TokenId>(i));
    if (!inserted) {
      throw Error(ErrorKind::Parse, "duplicate token '" + tokens[i] + "' at line " +
                                        std::to_string(i + 1) + " (first seen at line " +
                                        std::to_string(it->second + 1) + ")");
    }
    h.str(tokens[i]);
  }
  v.tokens_ = std::move(tokens);

  auto pad = v.find(kPad);
  auto unk = v.find(kUnk);
  if (!pad || !unk) {
    throw Error(ErrorKind::Parse, "missing required special tokens ([PAD], [UNK])");
  }
  v.pad_ = *pad;
  v.unk_ = *unk;
  v.cls_ = v.find(kCls);
  v.sep_ = v.find(kSep);
  v.mask_ = v.find(kMask);
  v.fingerprint_ = h.value();
  return v;
}

SubwordVocabulary SubwordVocabulary::load(const std::filesystem::path& path,
                                          std::string continuation_prefix) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open vocabulary file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return from_tokens(std::move(tokens), std::move(continuation_prefix));
}

std::optional<TokenId> SubwordVocabulary::find(std::string_view token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

const std::string& SubwordVocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw Error(ErrorKind::InvalidArgument,
                "token id " + std::to_string(id) + " out of range for vocabulary of size " +
                    std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

bool SubwordVocabulary::is_structural(TokenId id) const noexcept {
  return id == pad_ || (cls_ && id == *cls_) || (sep_ && id == *sep_) ||
         (mask_ && id == *mask_);
}

std::vector<TokenId> SubwordVocabulary::structural_ids() const {
  std::vector<TokenId> out{pad_};
  for (const auto& id : {cls_, sep_, mask_}) {
    if (id) out.push_back(*id);
  }
  return out;
}

std::string normalize_text(std::string_view text) {
  icu::UnicodeString u = icu::UnicodeString::fromUTF8(
      icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  u.toLower(icu::Locale::getRoot());
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  if (U_SUCCESS(status)) {
    icu::UnicodeString normalized = nfc->normalize(u, status);
    if (U_SUCCESS(status)) u = std::move(normalized);
  }
  std::string out;
  u.toUTF8String(out);
  return out;
}

std::vector<TokenId> segment_word(std::string_view word, const SubwordVocabulary& vocab) {
  const auto bounds = code_point_boundaries(word);
  const std::size_t n_chars = bounds.size() - 1;
  if (n_chars == 0) return {};
  if (n_chars > kMaxWordChars) return {vocab.unk_id()};

  std::vector<TokenId> pieces;
  std::string candidate;
  std::size_t start = 0;  // index into bounds
  while (start < n_chars) {
    std::optional<TokenId> found;
    std::size_t end = n_chars;
    for (; end > start; --end) {
      candidate.clear();
      if (start > 0) candidate += vocab.continuation_prefix();
      candidate.append(word.substr(bounds[start], bounds[end] - bounds[start]));
      found = vocab.find(candidate);
      if (found) break;
    }
    if (!found) return {vocab.unk_id()};
    pieces.push_back(*found);
    start = end;
  }
  return pieces;
}

namespace {

TokenSequence tokenize_impl(std::string_view text, const SubwordVocabulary& vocab,
                            std::optional<std::size_t> max_len) {
  TokenSequence seq;
  seq.surface = normalize_text(text);
  seq.vocab_fingerprint = vocab.fingerprint();
  const std::string_view s = seq.surface;
  auto full = [&] { return max_len && seq.ids.size() >= *max_len; };

  std::size_t i = 0;
  while (i < s.size() && !full()) {
    while (i < s.size() && is_space(static_cast<unsigned char>(s[i]))) ++i;
    if (i >= s.size()) break;
    std::size_t j = i;
    while (j < s.size() && !is_space(static_cast<unsigned char>(s[j]))) ++j;
    const std::string_view word = s.substr(i, j - i);

    const auto pieces = segment_word(word, vocab);
    if (pieces.size() == 1 && pieces[0] == vocab.unk_id()) {
      seq.ids.push_back(vocab.unk_id());
      seq.offsets.push_back({i, j});
    } else {
      // Recover each piece's byte length from the vocabulary entry.
      std::size_t pos = i;
      for (std::size_t p = 0; p < pieces.size() && !full(); ++p) {
        std::size_t len = vocab.token(pieces[p]).size();
        if (p > 0) len -= vocab.continuation_prefix().size();
        seq.ids.push_back(pieces[p]);
        seq.offsets.push_back({pos, pos + len});
        pos += len;
      }
    }
    i = j;
  }
  return seq;
}

}  // namespace

TokenSequence tokenize(std::string_view text, const SubwordVocabulary& vocab,
                       std::size_t max_len) {
  return tokenize_impl(text, vocab, max_len);
}

TokenSequence tokenize_unbounded(std::string_view text, const SubwordVocabulary& vocab) {
  return tokenize_impl(text, vocab, std::nullopt);
}

std::string detokenize(std::span<const TokenId> ids, const SubwordVocabulary& vocab) {
  std::string out;
  const std::string& prefix = vocab.continuation_prefix();
  for (TokenId id : ids) {
    const std::string& piece = vocab.token(id);
    const bool continuation =
        !prefix.empty() && piece.size() > prefix.size() && piece.starts_with(prefix);
    if (continuation && !out.empty()) {
      out.append(piece, prefix.size());
    } else {
      if (!out.empty()) out.push_back(' ');
      out += piece;
    }
  }
  return out;
}

}  // namespace kbalign
