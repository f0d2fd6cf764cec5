#pragma once

#include <initializer_list>
#include <set>
#include <stdexcept>
#include <string>

#include "json.hpp"

namespace todlab {

using json = nlohmann::json;

// Raised for any malformed input document. `where` is a slash-separated
// field path so callers can locate the offending field.
class SchemaError : public std::runtime_error {
 public:
  SchemaError(const std::string& where, const std::string& what)
      : std::runtime_error(where + ": " + what) {}
};

inline void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw SchemaError(where, "expected a JSON object");
}

// Strict field check: all of `required` present, nothing outside
// required+optional allowed. Extra fields are rejected.
inline void require_keys(const json& j, const std::string& where,
                         std::initializer_list<const char*> required,
                         std::initializer_list<const char*> optional = {}) {
  require_object(j, where);
  for (const char* k : required) {
    if (!j.contains(k)) throw SchemaError(where, std::string("missing field '") + k + "'");
  }
  std::set<std::string> allowed;
  for (const char* k : required) allowed.insert(k);
  for (const char* k : optional) allowed.insert(k);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key()))
      throw SchemaError(where, "unexpected field '" + it.key() + "'");
  }
}

inline const json& get_field(const json& j, const char* key, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) throw SchemaError(where, std::string("missing field '") + key + "'");
  return *it;
}

inline std::string get_string(const json& j, const char* key, const std::string& where) {
  const json& f = get_field(j, key, where);
  if (!f.is_string()) throw SchemaError(where + "/" + key, "expected a string");
  return f.get<std::string>();
}

inline bool get_bool(const json& j, const char* key, const std::string& where) {
  const json& f = get_field(j, key, where);
  if (!f.is_boolean()) throw SchemaError(where + "/" + key, "expected a boolean");
  return f.get<bool>();
}

inline double get_number(const json& j, const char* key, const std::string& where) {
  const json& f = get_field(j, key, where);
  if (!f.is_number()) throw SchemaError(where + "/" + key, "expected a number");
  return f.get<double>();
}

inline int get_int(const json& j, const char* key, const std::string& where) {
  const json& f = get_field(j, key, where);
  if (!f.is_number_integer()) throw SchemaError(where + "/" + key, "expected an integer");
  return f.get<int>();
}

}  // namespace todlab
