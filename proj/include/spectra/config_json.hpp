#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

#include "json.hpp"

namespace spectra {

/// Invalid configuration. `pointer()` is a JSON pointer to the offending field
/// (e.g. "/model/model_dim").
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string pointer, const std::string& message)
      : std::invalid_argument((pointer.empty() ? std::string("/") : pointer) + ": " + message),
        pointer_(std::move(pointer)),
        message_(message) {}

  const std::string& pointer() const { return pointer_; }
  const std::string& message() const { return message_; }

 private:
  std::string pointer_;
  std::string message_;
};

namespace json_fields {

inline std::string join(std::string_view prefix, std::string_view key) {
  std::string out(prefix);
  out += '/';
  out += key;
  return out;
}

template <class T>
T read_as(const nlohmann::json& value, const std::string& pointer) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!value.is_boolean()) throw ConfigError(pointer, "expected a boolean");
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!value.is_number_unsigned()) {
        throw ConfigError(pointer, "expected a non-negative integer");
      }
    } else if constexpr (std::is_integral_v<T>) {
      if (!value.is_number_integer()) throw ConfigError(pointer, "expected an integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!value.is_number()) throw ConfigError(pointer, "expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!value.is_string()) throw ConfigError(pointer, "expected a string");
    }
    return value.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(pointer, e.what());
  }
}

template <class T>
T required(const nlohmann::json& obj, std::string_view key, std::string_view prefix) {
  const std::string pointer = join(prefix, key);
  if (!obj.is_object() || !obj.contains(key)) throw ConfigError(pointer, "missing required field");
  return read_as<T>(obj.at(key), pointer);
}

template <class T>
T optional(const nlohmann::json& obj, std::string_view key, std::string_view prefix, T fallback) {
  if (!obj.is_object() || !obj.contains(key) || obj.at(key).is_null()) return fallback;
  return read_as<T>(obj.at(key), join(prefix, key));
}

}  // namespace json_fields

}  // namespace spectra
