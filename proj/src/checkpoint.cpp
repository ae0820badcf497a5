#include "kbalign/checkpoint.hpp"

#include <fstream>

#include "kbalign/binary_io.hpp"

namespace kbalign {

namespace {
constexpr std::string_view kMagic = "KBALCKPT";
constexpr std::uint32_t kVersion = 1;
}  // namespace

void TensorFile::write(std::ostream& out) const {
  BinaryWriter w(out);
  w.raw(kMagic.data(), kMagic.size());
  w.u32(kVersion);
  w.str(header.dump());
  w.u64(tensors.size());
  for (const auto& [name, data] : tensors) {
    w.str(name);
    w.vec<float>(data);
  }
}

TensorFile TensorFile::read(std::istream& in) {
  BinaryReader r(in);
  r.expect_magic(kMagic, "checkpoint file");
  const auto version = r.u32();
  if (version != kVersion) {
    throw Error(ErrorKind::Parse, "unsupported checkpoint version " + std::to_string(version));
  }
  TensorFile f;
  try {
    f.header = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, std::string("corrupt checkpoint header: ") + e.what());
  }
  const auto n = r.length();
  for (std::uint64_t i = 0; i < n; ++i) {
    auto name = r.str();
    f.tensors.emplace(std::move(name), r.vec<float>());
  }
  return f;
}

void TensorFile::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write checkpoint " + path.string());
  write(out);
}

TensorFile TensorFile::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open checkpoint " + path.string());
  return read(in);
}

const std::vector<float>& TensorFile::tensor(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error(ErrorKind::Parse, "checkpoint lacks tensor '" + name + "'");
  return it->second;
}

}  // namespace kbalign
