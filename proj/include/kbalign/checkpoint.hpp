#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace kbalign {

/// Versioned binary container: magic, JSON header, then named float
/// tensors. Used for model checkpoints.
struct TensorFile {
  nlohmann::json header;
  std::map<std::string, std::vector<float>> tensors;

  void save(const std::filesystem::path& path) const;
  static TensorFile load(const std::filesystem::path& path);
  void write(std::ostream& out) const;
  static TensorFile read(std::istream& in);

  const std::vector<float>& tensor(const std::string& name) const;
};

}  // namespace kbalign
