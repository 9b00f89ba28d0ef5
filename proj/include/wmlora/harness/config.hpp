#pragma once

#include "wmlora/config.hpp"

#include <filesystem>
#include <optional>
#include <string_view>

namespace wmlora::harness {

enum class Profile { quick, full };

Profile parse_profile(std::string_view name);

/// Complete toy-scale experiment configuration. Sections:
/// dataset, autoencoder, unet, schedule, diffusion, codec, stage1, ppft_data,
/// ppft, eval, attack, seeds.
nlohmann::json default_config(Profile profile);

/// Defaults for `profile` with the file (JSON or YAML) applied as a merge patch.
nlohmann::json load_experiment_config(const std::optional<std::filesystem::path>& path, Profile profile);

/// Section `name` of `cfg`, or an empty object.
const nlohmann::json& section(const nlohmann::json& cfg, const std::string& name);

}  // namespace wmlora::harness
