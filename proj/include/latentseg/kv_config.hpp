#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace latentseg {

// Flat `key = value` text config. '#' starts a comment; blank lines ignored.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text);
  static KeyValueConfig load(const std::string& path);

  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { entries_[key] = value; }
  const std::map<std::string, std::string>& entries() const { return entries_; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  long get_int(const std::string& key, long fallback) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const;

  // Throws ConfigError naming the first key not in `known`.
  void reject_unknown(const std::set<std::string>& known) const;

  std::string to_text() const;

 private:
  std::map<std::string, std::string> entries_;
};

// Shortest round-tripping decimal form of a double.
std::string format_double(double v);
std::string join_ints(const std::vector<int>& values);

}  // namespace latentseg
