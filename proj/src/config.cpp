#include "wmlora/config.hpp"

#include <yaml-cpp/yaml.h>

#include <fstream>
#include <sstream>

namespace wmlora {

namespace {

nlohmann::json yaml_to_json(const YAML::Node& node) {
    switch (node.Type()) {
        case YAML::NodeType::Null:
        case YAML::NodeType::Undefined:
            return nullptr;
        case YAML::NodeType::Scalar: {
            const auto& s = node.Scalar();
            if (node.Tag() == "!") return s;  // quoted
            if (s == "true" || s == "True") return true;
            if (s == "false" || s == "False") return false;
            if (s == "null" || s == "~") return nullptr;
            try {
                std::size_t pos = 0;
                long long v = std::stoll(s, &pos);
                if (pos == s.size()) return v;
            } catch (...) {
            }
            try {
                std::size_t pos = 0;
                double v = std::stod(s, &pos);
                if (pos == s.size()) return v;
            } catch (...) {
            }
            return s;
        }
        case YAML::NodeType::Sequence: {
            auto arr = nlohmann::json::array();
            for (const auto& item : node) arr.push_back(yaml_to_json(item));
            return arr;
        }
        case YAML::NodeType::Map: {
            auto obj = nlohmann::json::object();
            for (const auto& kv : node) obj[kv.first.as<std::string>()] = yaml_to_json(kv.second);
            return obj;
        }
    }
    return nullptr;
}

}  // namespace

nlohmann::json load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    auto ext = path.extension().string();
    try {
        if (ext == ".yaml" || ext == ".yml") {
            std::stringstream ss;
            ss << in.rdbuf();
            return yaml_to_json(YAML::Load(ss.str()));
        }
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed config " + path.string() + ": " + e.what());
    } catch (const YAML::Exception& e) {
        throw ConfigError("malformed config " + path.string() + ": " + e.what());
    }
}

std::string config_hash(const nlohmann::json& cfg) {
    return fnv1a_hex(cfg.dump());
}

nlohmann::json merged(nlohmann::json base, const nlohmann::json& overrides) {
    base.merge_patch(overrides);
    return base;
}

}  // namespace wmlora
