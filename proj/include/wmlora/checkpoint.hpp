#pragma once

#include "wmlora/common.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>

namespace wmlora {

/// Named tensors plus free-form JSON metadata.
///
/// On disk this is the safetensors layout: an 8-byte little-endian header
/// length, a JSON header mapping tensor names to dtype/shape/byte ranges, and
/// the raw little-endian payload. Metadata is stored as a JSON string under
/// `__metadata__.json` so any safetensors reader can open the file.
struct Checkpoint {
    NamedTensors tensors;
    nlohmann::json metadata = nlohmann::json::object();
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace wmlora
