// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "c3de/tensor.hpp"

namespace c3de {

inline constexpr int kCheckpointVersion = 1;

// Checkpoint layout: `<stem>.json` (descriptor) + `<stem>.bin` (little-endian
// f64 values of every parameter, concatenated in descriptor order).
struct CheckpointPaths {
  std::filesystem::path descriptor;
  std::filesystem::path blob;

  static CheckpointPaths from_stem(const std::filesystem::path& stem) {
    auto d = stem;
    auto b = stem;
    d += ".json";
    b += ".bin";
    return {d, b};
  }
};

namespace detail {

inline void write_le_f64(std::ofstream& os, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFFu);
  os.write(reinterpret_cast<const char*>(buf), 8);
}

inline double read_le_f64(const unsigned char* buf) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& stem,
                            const std::vector<const Parameter*>& params,
                            const nlohmann::json& hyperparameters) {
  const auto paths = CheckpointPaths::from_stem(stem);
  nlohmann::json desc;
  desc["version"] = kCheckpointVersion;
  desc["blob"] = paths.blob.filename().string();
  desc["hyperparameters"] = hyperparameters;
  auto& plist = desc["parameters"];
  plist = nlohmann::json::array();
  std::ofstream blob(paths.blob, std::ios::binary | std::ios::trunc);
  if (!blob) throw std::runtime_error("checkpoint: cannot write " + paths.blob.string());
  for (const Parameter* p : params) {
    plist.push_back({{"name", p->name}, {"shape", p->value.shape()}});
    for (double v : p->value.values()) detail::write_le_f64(blob, v);
  }
  std::ofstream js(paths.descriptor, std::ios::trunc);
  if (!js) throw std::runtime_error("checkpoint: cannot write " + paths.descriptor.string());
  js << desc.dump(2) << '\n';
}

inline nlohmann::json read_checkpoint_descriptor(const std::filesystem::path& stem) {
  const auto paths = CheckpointPaths::from_stem(stem);
  std::ifstream js(paths.descriptor);
  if (!js) throw std::runtime_error("checkpoint: missing descriptor " + paths.descriptor.string());
  nlohmann::json desc = nlohmann::json::parse(js);
  const int version = desc.value("version", -1);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: version " + std::to_string(version) +
                             " does not match supported version " +
                             std::to_string(kCheckpointVersion));
  }
  return desc;
}

/// Loads values into `params` (matched by name, shapes must agree). Returns
/// the stored hyperparameters.
inline nlohmann::json load_checkpoint(const std::filesystem::path& stem,
                                      const std::vector<Parameter*>& params) {
  const auto paths = CheckpointPaths::from_stem(stem);
  nlohmann::json desc = read_checkpoint_descriptor(stem);
  std::ifstream blob(paths.blob, std::ios::binary);
  if (!blob) throw std::runtime_error("checkpoint: missing blob " + paths.blob.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(blob)),
                                   std::istreambuf_iterator<char>());
  std::size_t offset = 0;
  std::vector<std::pair<std::string, Tensor>> stored;
  for (const auto& entry : desc.at("parameters")) {
    Shape shape = entry.at("shape").get<Shape>();
    const std::size_t n = shape_numel(shape);
    if (offset + 8 * n > bytes.size()) {
      throw std::runtime_error("checkpoint: blob truncated at parameter '" +
                               entry.at("name").get<std::string>() + "'");
    }
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = detail::read_le_f64(&bytes[offset + 8 * i]);
    offset += 8 * n;
    stored.emplace_back(entry.at("name").get<std::string>(), Tensor(shape, std::move(values)));
  }
  if (offset != bytes.size()) throw std::runtime_error("checkpoint: trailing bytes in blob");
  for (Parameter* p : params) {
    auto it = std::find_if(stored.begin(), stored.end(),
                           [&](const auto& s) { return s.first == p->name; });
    if (it == stored.end()) {
      throw std::runtime_error("checkpoint: parameter '" + p->name + "' not found");
    }
    if (it->second.shape() != p->value.shape()) {
      throw std::runtime_error("checkpoint: parameter '" + p->name + "' has shape " +
                               shape_str(it->second.shape()) + ", expected " +
                               shape_str(p->value.shape()));
    }
    p->value = it->second;
    p->grad = Tensor(p->value.shape(), 0.0);
  }
  return desc.at("hyperparameters");
}

}  // namespace c3de
