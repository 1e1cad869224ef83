#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

namespace pimap {

// Plain-text `key = value` configuration. `#` starts a comment; keys may use
// dotted prefixes (`pretrain.epochs`) to group settings.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse(const std::string& text);
  static KeyValueConfig load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::optional<std::string> get(const std::string& key) const;

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Keys under `prefix.` with the prefix stripped.
  KeyValueConfig section(const std::string& prefix) const;

  // Canonical text: sorted keys, one `key = value` per line.
  std::string to_string() const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace pimap
