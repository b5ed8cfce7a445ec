#pragma once

// "limeguard-ckpt-v1" model files: magic line, length-prefixed JSON metadata,
// raw little-endian doubles, then an FNV-1a checksum of everything before it.

#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"
#include "limeguard/model.hpp"

namespace limeguard {

inline constexpr const char* kCheckpointMagic = "limeguard-ckpt-v1\n";

struct CheckpointMeta {
  std::string tag;                         // e.g. "baseline", "refined"
  std::optional<std::string> parent_hash;  // parameter hash of the model this one was derived from
  int iteration = 0;                       // refinement iteration; 0 for a trained baseline
  nlohmann::json extra = nlohmann::json::object();
};

/// Hex FNV-1a over the raw parameter bytes.
std::string parameter_hash(const Classifier& model);

void save_checkpoint(const std::filesystem::path& path, const Classifier& model, const CheckpointMeta& meta);

struct LoadedCheckpoint {
  Classifier model;
  CheckpointMeta meta;
  std::string hash;
};

/// Throws IngestionError on a bad magic, checksum or parameter count.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace limeguard
