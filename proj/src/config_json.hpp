#pragma once

#include <json.hpp>

#include "slt/config.hpp"

namespace slt::detail {

nlohmann::json run_config_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j);

}  // namespace slt::detail
