#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "esknet/errors.hpp"

namespace esknet {

/// Flat "section.key = value" document. Blank lines and lines starting with
/// '#' are ignored; later assignments override earlier ones.
class KeyValues {
 public:
  static KeyValues parse(std::string_view text) {
    KeyValues kv;
    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
      ++line_no;
      const auto s = trim(line);
      if (s.empty() || s.front() == '#') continue;
      const auto eq = s.find('=');
      if (eq == std::string_view::npos) {
        throw ConfigError("line " + std::to_string(line_no) + ": expected key = value, got '" + std::string(s) + "'");
      }
      const auto key = trim(s.substr(0, eq));
      if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
      kv.values_[std::string(key)] = std::string(trim(s.substr(eq + 1)));
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    std::ostringstream oss;
    oss << in.rdbuf();
    return parse(oss.str());
  }

  std::string format() const {
    std::ostringstream oss;
    for (const auto& [k, v] : values_) oss << k << " = " << v << '\n';
    return oss.str();
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  void merge(const KeyValues& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
  }
  const std::map<std::string, std::string>& entries() const { return values_; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  template <typename N>
  N get_number(const std::string& key, N fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return parse_number<N>(key, it->second);
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("key " + key + ": expected true/false, got '" + it->second + "'");
  }

  template <typename N>
  std::vector<N> get_list(const std::string& key, std::vector<N> fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<N> out;
    if (trim(it->second).empty()) return out;
    std::string_view rest = it->second;
    while (true) {
      const auto comma = rest.find(',');
      out.push_back(parse_number<N>(key, std::string(trim(rest.substr(0, comma)))));
      if (comma == std::string_view::npos) break;
      rest = rest.substr(comma + 1);
    }
    return out;
  }

  template <typename N>
  static std::string join(const std::vector<N>& v) {
    std::ostringstream oss;
    for (std::size_t i = 0; i < v.size(); ++i) oss << (i ? "," : "") << v[i];
    return oss.str();
  }

  static std::string number(double v) {
    std::ostringstream oss;
    oss.precision(17);
    oss << v;
    return oss.str();
  }

 private:
  static std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
  }

  template <typename N>
  static N parse_number(const std::string& key, const std::string& text) {
    N value{};
    if constexpr (std::is_floating_point_v<N>) {
      try {
        std::size_t used = 0;
        value = static_cast<N>(std::stod(text, &used));
        if (used != text.size()) throw ConfigError("");
      } catch (const std::exception&) {
        throw ConfigError("key " + key + ": '" + text + "' is not a number");
      }
    } else {
      const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
      if (ec != std::errc() || ptr != text.data() + text.size()) {
        throw ConfigError("key " + key + ": '" + text + "' is not a valid integer");
      }
    }
    return value;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace esknet
