#pragma once

// Binary checkpoints: "CASPERCK", u32 version, u64 header length, JSON header (model config,
// normalization statistics, tensor names and shapes, free-form metadata), then every tensor as
// little-endian f64 in header order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "casper/data.hpp"
#include "casper/error.hpp"
#include "casper/model.hpp"

namespace casper {

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'C', 'A', 'S', 'P', 'E', 'R', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct LoadedCheckpoint {
  CasperModel model;
  NormalizationStats stats;
  nlohmann::json metadata;
};

inline void save_checkpoint(const std::filesystem::path& path, const CasperModel& model, const NormalizationStats& stats,
                            const nlohmann::json& metadata = nlohmann::json::object()) {
  const auto tensors = model.named_tensors();
  nlohmann::json header;
  header["model"] = model.config();
  header["normalization"] = {{"mean", stats.mean}, {"std", stats.std}, {"global_fallback", stats.global_fallback}};
  header["metadata"] = metadata;
  auto& list = header["tensors"] = nlohmann::json::array();
  for (auto& t : tensors) list.push_back({{"name", t.name}, {"shape", t.tensor.shape()}, {"trainable", t.trainable}});
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path.string());
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t length = text.size();
  f.write(kCheckpointMagic, sizeof kCheckpointMagic);
  f.write(reinterpret_cast<const char*>(&version), sizeof version);
  f.write(reinterpret_cast<const char*>(&length), sizeof length);
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (auto& t : tensors) {
    auto v = t.tensor.value();
    f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!f) throw std::runtime_error("failed writing checkpoint " + path.string());
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CompatibilityError("cannot open checkpoint " + path.string());
  char magic[sizeof kCheckpointMagic];
  std::uint32_t version = 0;
  std::uint64_t length = 0;
  f.read(magic, sizeof magic);
  f.read(reinterpret_cast<char*>(&version), sizeof version);
  f.read(reinterpret_cast<char*>(&length), sizeof length);
  if (!f || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw CompatibilityError(path.string() + " is not a checkpoint");
  if (version != kCheckpointVersion)
    throw CompatibilityError("checkpoint version " + std::to_string(version) + " is not supported");
  std::string text(length, '\0');
  f.read(text.data(), static_cast<std::streamsize>(length));
  if (!f) throw CompatibilityError("checkpoint header is truncated");

  nlohmann::json header;
  ModelConfig config;
  try {
    header = nlohmann::json::parse(text);
    config = header.at("model").get<ModelConfig>();
    config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw CompatibilityError(std::string("checkpoint header is malformed: ") + e.what());
  } catch (const ConfigError& e) {
    throw CompatibilityError(std::string("checkpoint model config is invalid: ") + e.what());
  }

  LoadedCheckpoint out{CasperModel(config), {}, header.value("metadata", nlohmann::json::object())};
  auto tensors = out.model.named_tensors();
  const auto& list = header.at("tensors");
  if (list.size() != tensors.size()) throw CompatibilityError("checkpoint tensor count does not match the model");
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    const auto name = list[k].at("name").get<std::string>();
    const auto shape = list[k].at("shape").get<ad::Shape>();
    if (name != tensors[k].name || shape != tensors[k].tensor.shape())
      throw CompatibilityError("checkpoint tensor " + name + " does not match model tensor " + tensors[k].name);
    auto dst = tensors[k].tensor.mutable_value();
    f.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size() * sizeof(double)));
    if (!f) throw CompatibilityError("checkpoint data is truncated at " + name);
  }
  const auto& norm = header.at("normalization");
  out.stats.mean = norm.at("mean").get<std::vector<double>>();
  out.stats.std = norm.at("std").get<std::vector<double>>();
  out.stats.global_fallback = norm.at("global_fallback").get<std::vector<std::uint8_t>>();
  return out;
}

}  // namespace casper
