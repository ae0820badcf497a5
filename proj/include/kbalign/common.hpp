#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace kbalign {

using TokenId = std::int32_t;
using Fingerprint = std::uint64_t;

// Error categories map onto CLI exit codes.
enum class ErrorKind {
  Io,
  Parse,
  InvalidArgument,
  Fingerprint,
  Numeric,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

std::string_view error_kind_name(ErrorKind kind);

// 64-bit FNV-1a, incremental.
class Hasher {
 public:
  Hasher& bytes(const void* data, std::size_t size);
  Hasher& str(std::string_view s);
  Hasher& u64(std::uint64_t v);
  Hasher& f64(double v);
  Fingerprint value() const noexcept { return state_; }

 private:
  Fingerprint state_ = 14695981039346656037ULL;
};

std::string fingerprint_hex(Fingerprint fp);
Fingerprint parse_fingerprint_hex(std::string_view hex);

// Derives an independent stream seed from a base seed and a list of tags.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags);

}  // namespace kbalign
