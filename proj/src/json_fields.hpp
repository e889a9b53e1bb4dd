#pragma once

// Typed field access for JSON config blocks with dotted-path errors.

#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "kft/errors.hpp"

namespace kft::detail {

class JsonFields {
 public:
  JsonFields(const nlohmann::json& obj, std::string prefix) : obj_(obj), prefix_(std::move(prefix)) {
    if (!obj_.is_object()) throw ConfigError("expected an object", prefix_);
  }

  std::string path(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  bool has(const std::string& key) {
    seen_.insert(key);
    return obj_.contains(key) && !obj_.at(key).is_null();
  }

  template <class T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    out = convert<T>(obj_.at(key), path(key));
  }

  template <class T>
  T require(const std::string& key) {
    if (!has(key)) throw ConfigError("required field is missing", path(key));
    return convert<T>(obj_.at(key), path(key));
  }

  const nlohmann::json& raw(const std::string& key) {
    seen_.insert(key);
    return obj_.at(key);
  }

  /// Rejects keys that were never read.
  void finish() const {
    for (const auto& item : obj_.items()) {
      if (!seen_.count(item.key())) throw ConfigError("unknown field", path(item.key()));
    }
  }

  template <class T>
  static T convert(const nlohmann::json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("expected a boolean", where);
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
      if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<long long>() < 0)) {
        throw ConfigError("expected a non-negative integer", where);
      }
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("expected a number", where);
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("expected a string", where);
      return v.get<std::string>();
    } else {
      if (!v.is_array()) throw ConfigError("expected an array", where);
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(convert<typename T::value_type>(v[i], where + "[" + std::to_string(i) + "]"));
      }
      return out;
    }
  }

 private:
  const nlohmann::json& obj_;
  std::string prefix_;
  std::set<std::string> seen_;
};

/// Runs `parse` and re-labels a path-less ConfigError with `where`.
template <class F>
auto with_path(const std::string& where, F&& parse) {
  try {
    return parse();
  } catch (const ConfigError& e) {
    if (!e.path().empty()) throw;
    throw ConfigError(e.what(), where);
  }
}

}  // namespace kft::detail
