#pragma once

// Flat key=value configuration with dotted keys. Blank lines and lines
// starting with '#' are ignored. Every key must be read by someone; leftovers
// are reported so typos do not silently fall back to defaults.

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fda/error.hpp"

namespace fda {

class Config {
 public:
  Config() = default;

  static Config parse(std::string_view text, const std::string& origin = "<config>") {
    Config c;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const std::size_t end = std::min(text.find('\n', pos), text.size());
      std::string_view line = trim(text.substr(pos, end - pos));
      pos = end + 1;
      ++line_no;
      if (line.empty() || line.front() == '#') continue;
      const std::size_t eq = line.find('=');
      require(eq != std::string_view::npos, ErrorCode::ConfigInvalid,
              origin + ":" + std::to_string(line_no) + ": expected key=value");
      const std::string key(trim(line.substr(0, eq)));
      require(!key.empty(), ErrorCode::ConfigInvalid, origin + ":" + std::to_string(line_no) + ": empty key");
      require(!c.values_.contains(key), ErrorCode::ConfigInvalid,
              origin + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
      c.values_[key] = std::string(trim(line.substr(eq + 1)));
      if (end == text.size()) break;
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::Io, "cannot read config '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  bool has(const std::string& key) const { return values_.contains(key); }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : to_double(key, it->second);
  }

  std::size_t get_size(const std::string& key, std::size_t fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::size_t v = 0;
    const auto& s = it->second;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    require(r.ec == std::errc{} && r.ptr == s.data() + s.size(), ErrorCode::ConfigInvalid,
            "key '" + key + "': expected a non-negative integer, got '" + s + "'");
    return v;
  }

  bool get_bool(const std::string& key, bool fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    fail(ErrorCode::ConfigInvalid, "key '" + key + "': expected true/false, got '" + it->second + "'");
  }

  std::vector<double> get_doubles(const std::string& key, const std::vector<double>& fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<double> out;
    std::string_view rest = it->second;
    while (!rest.empty()) {
      const std::size_t comma = std::min(rest.find(','), rest.size());
      out.push_back(to_double(key, std::string(trim(rest.substr(0, comma)))));
      rest = comma < rest.size() ? rest.substr(comma + 1) : std::string_view{};
    }
    require(!out.empty(), ErrorCode::ConfigInvalid, "key '" + key + "': empty list");
    return out;
  }

  /// Keys present in the file that nothing has read.
  std::vector<std::string> unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (!used_.contains(k)) out.push_back(k);
    return out;
  }

  void require_all_used() const {
    const auto left = unused_keys();
    if (left.empty()) return;
    std::string msg = "unknown config key(s):";
    for (const auto& k : left) msg += " " + k;
    fail(ErrorCode::ConfigInvalid, msg);
  }

  /// Canonical text (sorted key=value lines), used for digests.
  std::string canonical() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
  }

 private:
  static std::string_view trim(std::string_view s) {
    const auto ws = " \t\r";
    const std::size_t b = s.find_first_not_of(ws);
    if (b == std::string_view::npos) return {};
    const std::size_t e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
  }

  static double to_double(const std::string& key, const std::string& s) {
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    require(r.ec == std::errc{} && r.ptr == s.data() + s.size(), ErrorCode::ConfigInvalid,
            "key '" + key + "': expected a number, got '" + s + "'");
    return v;
  }

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

}  // namespace fda
