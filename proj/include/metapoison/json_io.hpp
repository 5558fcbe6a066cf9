#pragma once

#include <json.hpp>

#include "metapoison/models.hpp"

namespace metapoison {

void to_json(nlohmann::json& j, const ArchSpec& arch);
void from_json(const nlohmann::json& j, ArchSpec& arch);

}  // namespace metapoison
