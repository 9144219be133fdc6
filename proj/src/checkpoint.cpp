#include "coa/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace coa {
namespace {

void write_le_floats(std::ofstream& out, const float* data, Index count) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(float)));
  } else {
    for (Index i = 0; i < count; ++i) {
      auto bits = std::bit_cast<std::uint32_t>(data[i]);
      bits = __builtin_bswap32(bits);
      out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
  }
}

void read_le_floats(std::ifstream& in, float* data, Index count) {
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * sizeof(float)));
  if constexpr (std::endian::native != std::endian::little) {
    for (Index i = 0; i < count; ++i) {
      data[i] = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<std::uint32_t>(data[i])));
    }
  }
}

nlohmann::json read_json(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw InputError("checkpoint: cannot open " + file.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("checkpoint: malformed " + file.string() + ": " + e.what());
  }
}

}  // namespace

nlohmann::json to_json(const NetConfig& c) {
  return {{"encoder_widths", c.encoder_widths},   {"decoder_widths", c.decoder_widths},
          {"blocks_per_stage", c.blocks_per_stage}, {"in_channels", c.in_channels},
          {"activation", to_string(c.activation)},  {"global_residual", c.global_residual}};
}

NetConfig net_config_from_json(const nlohmann::json& j) {
  try {
    NetConfig c;
    c.encoder_widths = j.at("encoder_widths").get<std::vector<Index>>();
    c.decoder_widths = j.at("decoder_widths").get<std::vector<Index>>();
    c.blocks_per_stage = j.at("blocks_per_stage").get<Index>();
    c.in_channels = j.value("in_channels", Index(3));
    c.activation = activation_from_string(j.value("activation", std::string("silu")));
    c.global_residual = j.value("global_residual", true);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("net_config: ") + e.what());
  }
}

void save_param_blobs(const std::filesystem::path& dir, const ParamList<float>& params, const CheckpointInfo& info) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format_version"] = info.format_version;
  manifest["role"] = info.role;
  manifest["step"] = info.step;
  manifest["phase"] = info.phase;
  manifest["net_config"] = info.net_config;
  manifest["params"] = nlohmann::json::array();
  for (const auto& p : params) {
    const std::string file = p.name + ".bin";
    manifest["params"].push_back({{"name", p.name}, {"shape", p.shape}, {"file", file}});
    std::ofstream out(dir / file, std::ios::binary);
    if (!out) throw InputError("checkpoint: cannot write " + (dir / file).string());
    write_le_floats(out, p.value, p.size);
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir) {
  const nlohmann::json m = read_json(dir / "manifest.json");
  CheckpointInfo info;
  info.format_version = m.value("format_version", 0);
  if (info.format_version != kCheckpointFormatVersion) {
    throw InputError("checkpoint: unsupported format_version " + std::to_string(info.format_version));
  }
  info.role = m.value("role", std::string());
  info.step = m.value("step", 0L);
  info.phase = m.value("phase", std::string());
  info.net_config = m.value("net_config", nlohmann::json::object());
  return info;
}

CheckpointInfo load_param_blobs(const std::filesystem::path& dir, const ParamList<float>& params) {
  const CheckpointInfo info = read_checkpoint_info(dir);
  const nlohmann::json m = read_json(dir / "manifest.json");
  const auto& entries = m.at("params");
  if (entries.size() != params.size()) {
    throw ConfigError("checkpoint: expected " + std::to_string(params.size()) + " parameters, found " +
                      std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = entries[i];
    if (e.at("name").get<std::string>() != params[i].name) {
      throw ConfigError("checkpoint: parameter " + std::to_string(i) + " is '" + e.at("name").get<std::string>() +
                        "', expected '" + params[i].name + "'");
    }
    if (e.at("shape").get<std::vector<Index>>() != params[i].shape) {
      throw ConfigError("checkpoint: shape mismatch for " + params[i].name);
    }
    const auto file = dir / e.at("file").get<std::string>();
    std::ifstream in(file, std::ios::binary | std::ios::ate);
    if (!in) throw InputError("checkpoint: missing blob " + file.string());
    if (static_cast<Index>(in.tellg()) != params[i].size * static_cast<Index>(sizeof(float))) {
      throw InputError("checkpoint: blob size mismatch for " + params[i].name);
    }
    in.seekg(0);
    read_le_floats(in, params[i].value, params[i].size);
  }
  return info;
}

void save_checkpoint(const std::filesystem::path& dir, ModelHandle& model, Role role, long step,
                     const std::string& phase) {
  CheckpointInfo info;
  info.role = to_string(role);
  info.step = step;
  info.phase = phase;
  info.net_config = to_json(model.config());
  save_param_blobs(dir, model.params(), info);
}

ModelHandle load_checkpoint(const std::filesystem::path& dir, CheckpointInfo* info) {
  const CheckpointInfo header = read_checkpoint_info(dir);
  if (header.net_config.value("kind", std::string()) == "embedding_backend") {
    throw ConfigError("checkpoint: " + dir.string() + " holds an embedding backend, not a dehazing model");
  }
  ModelHandle model(net_config_from_json(header.net_config));
  const CheckpointInfo loaded = load_param_blobs(dir, model.params());
  if (info) *info = loaded;
  return model;
}

void save_backend(const std::filesystem::path& dir, EmbeddingBackend<float>& backend) {
  CheckpointInfo info;
  info.role = "embedding-backend";
  info.phase = "prompts";
  info.net_config = {{"kind", "embedding_backend"}, {"widths", backend.widths()}, {"in_channels", backend.in_channels()}};
  save_param_blobs(dir, backend.params(), info);
}

EmbeddingBackend<float> load_backend(const std::filesystem::path& dir) {
  const CheckpointInfo header = read_checkpoint_info(dir);
  if (header.net_config.value("kind", std::string()) != "embedding_backend") {
    throw ConfigError("checkpoint: " + dir.string() + " is not an embedding backend");
  }
  EmbeddingBackend<float> backend(header.net_config.at("widths").get<std::vector<Index>>(), 0,
                                  header.net_config.value("in_channels", Index(3)));
  load_param_blobs(dir, backend.params());
  return backend;
}

}  // namespace coa
