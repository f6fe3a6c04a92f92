#pragma once

#include "detra/errors.hpp"
#include "json.hpp"

#include <cstdio>
#include <set>
#include <string>

namespace detra {

using nlohmann::json;

/// Reads the fields visited by `visit(obj, f)` from `j`, rejecting unknown keys.
template <typename T, typename Visit>
void read_fields(const json& j, T& obj, Visit&& visit, const char* where) {
  if (!j.is_object()) throw ValidationError(std::string(where) + ": expected an object");
  std::set<std::string> known;
  visit(obj, [&](const char* key, auto& field) {
    known.insert(key);
    auto it = j.find(key);
    if (it == j.end()) return;
    try {
      it->get_to(field);
    } catch (const json::exception& e) {
      throw ValidationError(std::string(where) + "." + key + ": " + e.what());
    }
  });
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key()))
      throw ValidationError(std::string(where) + ": unknown key '" + it.key() + "'");
  }
}

template <typename T, typename Visit>
void write_fields(json& j, const T& obj, Visit&& visit) {
  j = json::object();
  visit(const_cast<T&>(obj), [&](const char* key, const auto& field) { j[key] = field; });
}

/// 17 significant digits, enough for an exact round trip.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detra
