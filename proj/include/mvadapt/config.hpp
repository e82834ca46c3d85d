#pragma once

// Strict JSON field reading: unknown keys and wrong types raise ConfigError
// naming the offending field.

#include <initializer_list>
#include <string>
#include <string_view>
#include <type_traits>

#include "mvadapt/error.hpp"
#include "json.hpp"

namespace mvadapt {

template <class V>
void read_field(const nlohmann::json& j, const char* key, V& out) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  auto bad = [&](const char* expected) {
    return ConfigError(key, std::string("expected ") + expected + ", got " + it->type_name() + " " + it->dump());
  };
  if constexpr (std::is_same_v<V, bool>) {
    if (!it->is_boolean()) throw bad("boolean");
  } else if constexpr (std::is_integral_v<V> && std::is_unsigned_v<V>) {
    if (!it->is_number_unsigned()) throw bad("non-negative integer");
  } else if constexpr (std::is_integral_v<V>) {
    if (!it->is_number_integer()) throw bad("integer");
  } else if constexpr (std::is_floating_point_v<V>) {
    if (!it->is_number()) throw bad("number");
  } else if constexpr (std::is_same_v<V, std::string>) {
    if (!it->is_string()) throw bad("string");
  }
  try {
    out = it->template get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(key, e.what());
  }
}

inline void check_keys(const nlohmann::json& j, std::initializer_list<std::string_view> known) {
  if (!j.is_object()) throw ConfigError("<section>", std::string("expected an object, got ") + j.type_name());
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (auto n : known) ok = ok || n == k;
    if (!ok) throw ConfigError(k, "unknown field");
  }
}

// Runs `f`, prefixing the field name of any ConfigError with `section`.
template <class F>
void in_section(const char* section, F&& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    const auto pos = what.find("': ");
    throw ConfigError(std::string(section) + "." + e.field(), pos == std::string::npos ? what : what.substr(pos + 3));
  }
}

// Parses `j[key]` into `out`, prefixing field names in errors with the section.
template <class V>
void read_section(const nlohmann::json& j, const char* key, V& out) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  in_section(key, [&] { from_json(*it, out); });
}

}  // namespace mvadapt
