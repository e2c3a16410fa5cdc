// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "ssnas/errors.hpp"

namespace ssnas::detail {

/// Rejects a config section that is not an object or carries a key the
/// reference serialization does not have.
inline void check_keys(const nlohmann::json& j, const nlohmann::json& reference, std::string_view section) {
  if (!j.is_object()) throw ParameterError(std::string(section) + ": expected a JSON object");
  for (const auto& [key, value] : j.items())
    if (!reference.contains(key)) throw ParameterError(std::string(section) + ": unknown key '" + key + "'");
}

}  // namespace ssnas::detail
