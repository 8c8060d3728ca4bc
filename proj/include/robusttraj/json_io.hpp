#pragma once

#include <string>

#include "json.hpp"
#include "robusttraj/scene.hpp"

namespace robusttraj {

nlohmann::json scene_to_json(const Scene& s);
Scene scene_from_json(const nlohmann::json& j, const std::string& path = "scene");

}  // namespace robusttraj
