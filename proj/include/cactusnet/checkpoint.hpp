#pragma once

#include <filesystem>
#include <string_view>

#include <nlohmann/json.hpp>

#include "cactusnet/nn.hpp"

namespace cnl {

inline constexpr std::string_view kCheckpointMagic = "CNLCKPT1";
inline constexpr int kCheckpointVersion = 1;

// Architecture description as stored in checkpoint headers.
nlohmann::json architecture_json(const Network& net);
Network network_from_architecture(const nlohmann::json& arch);

struct Checkpoint {
  Network net;
  nlohmann::json extra;  // caller-defined header fields
};

// Layout: 8-byte magic, u64 little-endian header length, UTF-8 JSON header,
// then little-endian float32 parameters (weights then bias) in layer order.
void save_checkpoint(const std::filesystem::path& path, const Network& net, const nlohmann::json& extra = {},
                     std::string_view magic = kCheckpointMagic);

// Throws FormatError; nothing is returned unless the whole file validates.
Checkpoint load_checkpoint(const std::filesystem::path& path, std::string_view magic = kCheckpointMagic);

inline void checkpoint_save(const Network& net, const std::filesystem::path& path) { save_checkpoint(path, net); }
inline Network checkpoint_load(const std::filesystem::path& path) { return load_checkpoint(path).net; }

}  // namespace cnl
