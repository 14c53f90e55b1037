#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include "json.hpp"
#include "sapfuse/errors.hpp"

namespace sapfuse::json_util {

using json = nlohmann::json;

/// Rejects any key of `obj` not listed in `allowed`.
inline void check_keys(const json& obj, std::initializer_list<std::string_view> allowed,
                       const std::string& context) {
  if (!obj.is_object()) throw ConfigError(context + ": expected a JSON object");
  for (const auto& item : obj.items()) {
    bool known = false;
    for (auto k : allowed) known = known || item.key() == k;
    if (!known) throw ConfigError(context + ": unknown key '" + item.key() + "'");
  }
}

/// Reads `key` into `out` when present, keeping the current value otherwise.
template <typename V>
void read(const json& obj, const char* key, V& out, const std::string& context) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    out = it->template get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(context + "." + key + ": " + e.what());
  }
}

}  // namespace sapfuse::json_util
