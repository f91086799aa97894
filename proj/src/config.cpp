#include "fairdisco/config.hpp"

#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "fairdisco/core.hpp"

namespace fairdisco {

namespace {
std::string strip(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}
}  // namespace

KeyValueConfig KeyValueConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError(fmt::format("cannot open config '{}'", path.string()));
  std::stringstream buffer;
  buffer << in.rdbuf();
  return from_string(buffer.str());
}

KeyValueConfig KeyValueConfig::from_string(const std::string& text) {
  KeyValueConfig config;
  std::stringstream ss(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const auto comment = line.find('#');
    if (comment != std::string::npos) line = line.substr(0, comment);
    line = strip(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError(fmt::format("config line {}: expected 'key = value'", line_no));
    const auto key = strip(line.substr(0, eq));
    const auto value = strip(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ValidationError(fmt::format("config line {}: empty key or value", line_no));
    if (config.values_.contains(key))
      throw ValidationError(fmt::format("config line {}: duplicate key '{}'", line_no, key));
    config.values_[key] = value;
  }
  return config;
}

void KeyValueConfig::require_known_keys(const std::set<std::string>& allowed) const {
  for (const auto& [key, value] : values_)
    if (!allowed.contains(key))
      throw ValidationError(fmt::format("unknown config key '{}'", key));
}

std::string KeyValueConfig::get_string(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ValidationError(fmt::format("missing config key '{}'", key));
  return it->second;
}

double KeyValueConfig::get_double(const std::string& key) const {
  try {
    return std::stod(get_string(key));
  } catch (const std::invalid_argument&) {
    throw ValidationError(fmt::format("config key '{}' is not a number", key));
  }
}

int KeyValueConfig::get_int(const std::string& key) const {
  try {
    return std::stoi(get_string(key));
  } catch (const std::invalid_argument&) {
    throw ValidationError(fmt::format("config key '{}' is not an integer", key));
  }
}

std::uint64_t KeyValueConfig::get_uint64(const std::string& key) const {
  try {
    return std::stoull(get_string(key));
  } catch (const std::invalid_argument&) {
    throw ValidationError(fmt::format("config key '{}' is not an unsigned integer", key));
  }
}

bool KeyValueConfig::get_bool(const std::string& key) const {
  const auto value = get_string(key);
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ValidationError(fmt::format("config key '{}' is not a boolean", key));
}

}  // namespace fairdisco
