// SPDX-License-Identifier: Apache-2.0
//
// JSON views of the configuration structs, used by manifests and run logs.
#pragma once

#include <nlohmann/json.hpp>

#include "maskgru/cells.hpp"
#include "maskgru/synthdata.hpp"

namespace maskgru {

nlohmann::json to_json(const SceneConfig& config);
SceneConfig scene_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const ModelConfig& config);

nlohmann::json to_json(const BBox& box);

}  // namespace maskgru
