#pragma once

#include <initializer_list>
#include <string>
#include <type_traits>

#include "json.hpp"
#include "stm3/error.hpp"

namespace stm3::detail {

using json = nlohmann::json;

inline json parse_object(const std::string& text, const char* section) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string(section) + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(std::string(section) + " must be a JSON object");
  return j;
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> keys, const char* section) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys) known = known || it.key() == k;
    if (!known) throw ConfigError(std::string("unknown key '") + it.key() + "' in " + section);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const char* section) {
  auto it = j.find(key);
  if (it == j.end()) return;
  if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
    if (!it->is_number_unsigned()) {
      throw ConfigError(std::string(section) + "." + key + " must be a nonnegative integer");
    }
  }
  try {
    out = it->template get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string(section) + "." + key + ": " + e.what());
  }
}

}  // namespace stm3::detail
