#pragma once

#include <filesystem>
#include <string>

#include "coa/dehaze_net.hpp"
#include "coa/real_guidance.hpp"
#include "json.hpp"

namespace coa {

inline constexpr int kCheckpointFormatVersion = 1;

struct CheckpointInfo {
  int format_version = kCheckpointFormatVersion;
  std::string role;
  long step = 0;
  std::string phase;
  nlohmann::json net_config;
};

nlohmann::json to_json(const NetConfig& config);
NetConfig net_config_from_json(const nlohmann::json& j);

/// Writes manifest.json plus one little-endian float32 blob per parameter,
/// in parameter order. Files are named "<param name>.bin".
void save_param_blobs(const std::filesystem::path& dir, const ParamList<float>& params, const CheckpointInfo& info);

/// Reads the blobs named in `dir`/manifest.json into `params`; names, order
/// and shapes must match exactly.
CheckpointInfo load_param_blobs(const std::filesystem::path& dir, const ParamList<float>& params);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);

void save_checkpoint(const std::filesystem::path& dir, ModelHandle& model, Role role, long step,
                     const std::string& phase);
ModelHandle load_checkpoint(const std::filesystem::path& dir, CheckpointInfo* info = nullptr);

void save_backend(const std::filesystem::path& dir, EmbeddingBackend<float>& backend);
EmbeddingBackend<float> load_backend(const std::filesystem::path& dir);

}  // namespace coa
