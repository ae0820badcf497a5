#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "kbalign/common.hpp"

namespace kbalign {

// Little-endian host assumed; containers are not meant to cross architectures.
class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}

  void raw(const void* data, std::size_t size) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out_) throw Error(ErrorKind::Io, "write failed");
  }
  template <class T>
  void pod(const T& v) {
    raw(&v, sizeof v);
  }
  void u32(std::uint32_t v) { pod(v); }
  void u64(std::uint64_t v) { pod(v); }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  template <class T>
  void vec(std::span<const T> v) {
    u64(v.size());
    raw(v.data(), v.size() * sizeof(T));
  }

 private:
  std::ostream& out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::istream& in) : in_(in) {}

  void raw(void* data, std::size_t size) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(size));
    if (static_cast<std::size_t>(in_.gcount()) != size) {
      throw Error(ErrorKind::Parse, "unexpected end of binary container");
    }
  }
  template <class T>
  T pod() {
    T v;
    raw(&v, sizeof v);
    return v;
  }
  std::uint32_t u32() { return pod<std::uint32_t>(); }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  std::uint64_t length(std::uint64_t limit = 1ULL << 34) {
    auto n = u64();
    if (n > limit) throw Error(ErrorKind::Parse, "corrupt length field in binary container");
    return n;
  }
  std::string str() {
    std::string s(length(), '\0');
    raw(s.data(), s.size());
    return s;
  }
  template <class T>
  std::vector<T> vec() {
    std::vector<T> v(length() );
    raw(v.data(), v.size() * sizeof(T));
    return v;
  }
  void expect_magic(std::string_view magic, std::string_view what) {
    std::string got(magic.size(), '\0');
    in_.read(got.data(), static_cast<std::streamsize>(got.size()));
    if (got != magic) throw Error(ErrorKind::Parse, "not a " + std::string(what) + " (bad magic)");
  }

 private:
  std::istream& in_;
};

}  // namespace kbalign
