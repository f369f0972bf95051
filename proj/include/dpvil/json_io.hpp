#pragma once

#include <json.hpp>

#include "dpvil/engine.hpp"

namespace dpvil {

// Unknown keys are rejected with ConfigError; missing keys keep defaults.
void to_json(nlohmann::json& j, const EngineConfig& c);
void from_json(const nlohmann::json& j, EngineConfig& c);

// Reads a JSON document, mapping parse failures to ConfigError.
nlohmann::json parse_json_text(const std::string& text, const std::string& what);

}  // namespace dpvil
