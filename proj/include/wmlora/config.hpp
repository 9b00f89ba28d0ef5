#pragma once

#include "wmlora/common.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>

namespace wmlora {

/// Reads a JSON or YAML (by extension: .yaml/.yml) file into JSON.
nlohmann::json load_config_file(const std::filesystem::path& path);

/// Hash of the canonical (key-sorted, compact) JSON dump.
std::string config_hash(const nlohmann::json& cfg);

/// `base` with `overrides` applied as an RFC 7386 merge patch.
nlohmann::json merged(nlohmann::json base, const nlohmann::json& overrides);

/// Typed lookup with a default; throws ConfigError on type mismatch.
template <typename T>
T get_or(const nlohmann::json& j, const std::string& key, T fallback) {
    if (!j.is_object() || !j.contains(key) || j.at(key).is_null()) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config key '" + key + "': " + e.what());
    }
}

}  // namespace wmlora
