#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace osediff {

/// Every recognised key with its default value. Keys are dotted
/// (`train.lambda2`); the default's JSON type is the key's type.
const nlohmann::json& config_defaults();

/// Resolved configuration: defaults overlaid with a file and then with
/// `key=value` overrides. Nested objects in the file are flattened to dotted
/// keys; unknown keys and type mismatches raise ConfigError naming the key.
class Config {
 public:
  Config();
  explicit Config(nlohmann::json values);

  static Config from_file(const std::filesystem::path& path,
                          const std::vector<std::string>& overrides = {});
  static Config from_json(const nlohmann::json& doc, const std::vector<std::string>& overrides = {});

  /// Applies one `key=value` override; the value is parsed as JSON when
  /// possible and taken as a string otherwise.
  void apply_override(const std::string& assignment);
  void set(const std::string& key, const nlohmann::json& value);

  const nlohmann::json& values() const { return values_; }
  const nlohmann::json& at(const std::string& key) const;

  double number(const std::string& key) const { return at(key).get<double>(); }
  int64_t integer(const std::string& key) const { return at(key).get<int64_t>(); }
  bool flag(const std::string& key) const { return at(key).get<bool>(); }
  std::string text(const std::string& key) const { return at(key).get<std::string>(); }

  /// Pretty-printed resolved document.
  std::string echo() const;

 private:
  nlohmann::json values_;
};

}  // namespace osediff
