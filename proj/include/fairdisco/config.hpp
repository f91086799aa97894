#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>

namespace fairdisco {

/// Flat `key = value` document with '#' comments. Keys are validated against
/// the caller's allowed set so typos fail before any side effect.
class KeyValueConfig {
 public:
  static KeyValueConfig from_file(const std::filesystem::path& path);
  static KeyValueConfig from_string(const std::string& text);

  void require_known_keys(const std::set<std::string>& allowed) const;

  bool has(const std::string& key) const { return values_.contains(key); }
  std::string get_string(const std::string& key) const;
  double get_double(const std::string& key) const;
  int get_int(const std::string& key) const;
  std::uint64_t get_uint64(const std::string& key) const;
  bool get_bool(const std::string& key) const;  // true/false/1/0

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace fairdisco
