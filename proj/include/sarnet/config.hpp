#pragma once

#include <charconv>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>

#include "sarnet/errors.hpp"
#include "sarnet/records.hpp"

namespace sarnet {

/// Flat `key = value` configuration with `#` comments.
///
/// Every lookup names its default, and the looked-up value is recorded, so
/// `resolved()` lists every effective setting. Keys that were supplied but never
/// read are reported by `check_consumed()` (they are almost always typos).
class Config {
 public:
  Config() = default;

  static Config parse(std::string_view text, const std::string& origin = "config") {
    Config cfg;
    std::size_t line_no = 0;
    for (std::string_view line : detail::split(text, '\n')) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos)
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
      cfg.set(std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))));
    }
    return cfg;
  }

  void set(const std::string& key, const std::string& value) {
    if (key.empty()) throw ConfigError("empty config key");
    supplied_[key] = value;
  }

  /// Applies a `key=value` override.
  void set_assignment(std::string_view kv) {
    const auto eq = kv.find('=');
    if (eq == std::string_view::npos) throw ConfigError("override '" + std::string(kv) + "' is not key=value");
    set(std::string(trim(kv.substr(0, eq))), std::string(trim(kv.substr(eq + 1))));
  }

  bool has(const std::string& key) const { return supplied_.contains(key); }

  std::string str(const std::string& key, const std::string& fallback) {
    auto it = supplied_.find(key);
    const std::string value = it == supplied_.end() ? fallback : it->second;
    resolved_[key] = value;
    return value;
  }

  double num(const std::string& key, double fallback) {
    const std::string text = str(key, format(fallback));
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size())
      throw ConfigError("config key '" + key + "' expects a number, got '" + text + "'");
    return v;
  }

  std::int64_t integer(const std::string& key, std::int64_t fallback) {
    const std::string text = str(key, std::to_string(fallback));
    std::int64_t v = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size())
      throw ConfigError("config key '" + key + "' expects an integer, got '" + text + "'");
    return v;
  }

  std::size_t count(const std::string& key, std::size_t fallback) {
    const auto v = integer(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw ConfigError("config key '" + key + "' must be nonnegative");
    return static_cast<std::size_t>(v);
  }

  bool flag(const std::string& key, bool fallback) {
    const std::string text = str(key, fallback ? "true" : "false");
    if (text == "true" || text == "1" || text == "on") {
      resolved_[key] = "true";
      return true;
    }
    if (text == "false" || text == "0" || text == "off") {
      resolved_[key] = "false";
      return false;
    }
    throw ConfigError("config key '" + key + "' expects true/false, got '" + text + "'");
  }

  /// Sorted `key = value` lines of every setting read so far.
  std::string resolved() const {
    std::ostringstream out;
    for (const auto& [k, v] : resolved_) out << k << " = " << v << '\n';
    return out.str();
  }

  void check_consumed() const {
    for (const auto& [k, v] : supplied_)
      if (!resolved_.contains(k)) throw ConfigError("unknown config key '" + k + "'");
  }

  static std::string format(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
  }

 private:
  static std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
  }

  std::map<std::string, std::string> supplied_;
  std::map<std::string, std::string> resolved_;
};

}  // namespace sarnet
