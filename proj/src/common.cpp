#include "kbalign/common.hpp"

#include <bit>
#include <charconv>
#include <cstdio>
#include <initializer_list>

namespace kbalign {

std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Io: return "io";
    case ErrorKind::Parse: return "parse";
    case ErrorKind::InvalidArgument: return "invalid-argument";
    case ErrorKind::Fingerprint: return "fingerprint";
    case ErrorKind::Numeric: return "numeric";
  }
  return "unknown";
}

Hasher& Hasher::bytes(const void* data, std::size_t size) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    state_ ^= p[i];
    state_ *= 1099511628211ULL;
  }
  return *this;
}

Hasher& Hasher::str(std::string_view s) {
  u64(s.size());
  return bytes(s.data(), s.size());
}

Hasher& Hasher::u64(std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  return bytes(buf, 8);
}

Hasher& Hasher::f64(double v) { return u64(std::bit_cast<std::uint64_t>(v)); }

std::string fingerprint_hex(Fingerprint fp) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fp));
  return buf;
}

Fingerprint parse_fingerprint_hex(std::string_view hex) {
  Fingerprint fp = 0;
  auto [ptr, ec] = std::from_chars(hex.data(), hex.data() + hex.size(), fp, 16);
  if (ec != std::errc{} || ptr != hex.data() + hex.size()) {
    throw Error(ErrorKind::Parse, "invalid fingerprint '" + std::string(hex) + "'");
  }
  return fp;
}

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  // splitmix64 finalizer over the running state
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t s = mix(base);
  for (auto t : tags) s = mix(s ^ mix(t));
  return s;
}

}  // namespace kbalign
