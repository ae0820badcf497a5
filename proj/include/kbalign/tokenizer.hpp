#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kbalign/common.hpp"

namespace kbalign {

struct StringHash {
  using is_transparent = void;
  std::size_t operator()(std::string_view s) const noexcept {
    return std::hash<std::string_view>{}(s);
  }
};

/// Subword vocabulary loaded from a line-per-token file; the line index is the id.
///
/// `[PAD]` and `[UNK]` are required. `[CLS]`, `[SEP]` and `[MASK]` are
/// optional at load time; components that need them check `cls_id()` etc.
class SubwordVocabulary {
 public:
  static constexpr std::string_view kPad = "[PAD]";
  static constexpr std::string_view kUnk = "[UNK]";
  static constexpr std::string_view kCls = "[CLS]";
  static constexpr std::string_view kSep = "[SEP]";
  static constexpr std::string_view kMask = "[MASK]";

  static SubwordVocabulary load(const std::filesystem::path& path,
                                std::string continuation_prefix = "##");
  static SubwordVocabulary from_tokens(std::vector<std::string> tokens,
                                       std::string continuation_prefix = "##");

  std::size_t size() const noexcept { return tokens_.size(); }
  std::optional<TokenId> find(std::string_view token) const;
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  const std::string& continuation_prefix() const noexcept { return continuation_; }
  TokenId pad_id() const noexcept { return pad_; }
  TokenId unk_id() const noexcept { return unk_; }
  std::optional<TokenId> cls_id() const noexcept { return cls_; }
  std::optional<TokenId> sep_id() const noexcept { return sep_; }
  std::optional<TokenId> mask_id() const noexcept { return mask_; }

  // PAD, CLS, SEP and MASK: model artifacts that never carry text.
  bool is_structural(TokenId id) const noexcept;
  std::vector<TokenId> structural_ids() const;

  Fingerprint fingerprint() const noexcept { return fingerprint_; }

 private:
  SubwordVocabulary() = default;

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId, StringHash, std::equal_to<>> ids_;
  std::string continuation_;
  TokenId pad_ = 0;
  TokenId unk_ = 0;
  std::optional<TokenId> cls_, sep_, mask_;
  Fingerprint fingerprint_ = 0;
};

struct TokenOffset {
  std::size_t begin = 0;
  std::size_t end = 0;
};

/// Token ids of one sentence. `surface` is the normalized text and
/// `offsets` are byte spans into it.
struct TokenSequence {
  std::vector<TokenId> ids;
  std::string surface;
  std::vector<TokenOffset> offsets;
  Fingerprint vocab_fingerprint = 0;

  std::size_t size() const noexcept { return ids.size(); }
  bool empty() const noexcept { return ids.empty(); }
};

inline constexpr std::size_t kDefaultMaxTokens = 20;
inline constexpr std::size_t kMaxWordChars = 100;

// Lowercase followed by Unicode NFC.
std::string normalize_text(std::string_view text);

/// Segments one already-normalized word by greedy longest-prefix match.
/// Returns a single `[UNK]` when some position cannot be matched or the
/// word exceeds `kMaxWordChars` code points.
std::vector<TokenId> segment_word(std::string_view word, const SubwordVocabulary& vocab);

TokenSequence tokenize(std::string_view text, const SubwordVocabulary& vocab,
                       std::size_t max_len = kDefaultMaxTokens);

// Same segmentation with no length cap; used for knowledge-base surfaces.
TokenSequence tokenize_unbounded(std::string_view text, const SubwordVocabulary& vocab);

std::string detokenize(std::span<const TokenId> ids, const SubwordVocabulary& vocab);
inline std::string detokenize(const TokenSequence& seq, const SubwordVocabulary& vocab) {
  return detokenize(seq.ids, vocab);
}

}  // namespace kbalign
