#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace musc {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ordered `key=value` document: one pair per line, `#` starts a comment,
/// surrounding whitespace is trimmed, duplicate keys are an error.
class KeyValueDoc {
 public:
  static KeyValueDoc parse(std::string_view text);
  static KeyValueDoc load(const std::filesystem::path& path);

  void set(const std::string& key, std::string value);
  void set(const std::string& key, const char* value) { set(key, std::string(value)); }
  void set(const std::string& key, bool value) { set(key, std::string(value ? "true" : "false")); }
  void set(const std::string& key, int value) { set(key, std::to_string(value)); }
  void set(const std::string& key, std::uint64_t value) { set(key, std::to_string(value)); }
  void set(const std::string& key, double value);

  bool has(const std::string& key) const;
  std::optional<std::string> get(const std::string& key) const;

  std::string get_string(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  /// Throws ConfigError naming the first key not in `allowed`.
  void require_known(const std::set<std::string>& allowed) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }
  std::string to_string() const;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace musc
