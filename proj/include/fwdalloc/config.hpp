#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fwdalloc {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flat key/value text with TOML-style [section] headers. Keys are stored as
/// "section.key". Values are bare words, numbers, booleans, double-quoted
/// strings, or one-line [a, b, ...] lists. '#' starts a comment outside quotes.
class FlatConfig {
 public:
  static FlatConfig parse(const std::string& text, const std::string& origin = "<config>") {
    FlatConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::string section;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const std::string where = origin + ":" + std::to_string(line_no);
      line = trim(strip_comment(line));
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        if (section.empty()) throw ConfigError(where + ": empty section name");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
      const std::string key = trim(line.substr(0, eq));
      if (key.empty()) throw ConfigError(where + ": missing key");
      const std::string full = section.empty() ? key : section + "." + key;
      if (cfg.values_.count(full)) throw ConfigError(where + ": duplicate key '" + full + "'");
      cfg.values_[full] = Entry{trim(line.substr(eq + 1)), where};
    }
    return cfg;
  }

  static FlatConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  [[nodiscard]] bool has(const std::string& key) const { return values_.count(key) != 0; }

  [[nodiscard]] std::string get_string(const std::string& key, const std::string& fallback) const {
    const auto* e = find(key);
    return e ? unquote(e->raw) : fallback;
  }

  [[nodiscard]] double get_double(const std::string& key, double fallback) const {
    const auto* e = find(key);
    if (!e) return fallback;
    return to_double(unquote(e->raw), *e, key);
  }

  [[nodiscard]] std::size_t get_size(const std::string& key, std::size_t fallback) const {
    const auto* e = find(key);
    if (!e) return fallback;
    return to_size(unquote(e->raw), *e, key);
  }

  [[nodiscard]] std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    const auto* e = find(key);
    if (!e) return fallback;
    return to_size(unquote(e->raw), *e, key);
  }

  [[nodiscard]] bool get_bool(const std::string& key, bool fallback) const {
    const auto* e = find(key);
    if (!e) return fallback;
    const std::string v = unquote(e->raw);
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError(e->where + ": '" + key + "' must be true or false, got '" + v + "'");
  }

  [[nodiscard]] std::vector<std::string> get_list(const std::string& key,
                                                  const std::vector<std::string>& fallback) const {
    const auto* e = find(key);
    if (!e) return fallback;
    std::string v = e->raw;
    if (!v.empty() && v.front() == '[') {
      if (v.back() != ']') throw ConfigError(e->where + ": unterminated list for '" + key + "'");
      v = v.substr(1, v.size() - 2);
    }
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(v);
    while (std::getline(in, item, ',')) {
      item = unquote(trim(item));
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  [[nodiscard]] std::vector<std::size_t> get_size_list(const std::string& key,
                                                       const std::vector<std::size_t>& fallback) const {
    const auto* e = find(key);
    if (!e) return fallback;
    std::vector<std::size_t> out;
    for (const auto& item : get_list(key, {})) out.push_back(to_size(item, *e, key));
    return out;
  }

  /// Rejects keys nobody asked for, which catches typos in config files.
  void require_known() const {
    for (const auto& [key, entry] : values_)
      if (!consumed_.count(key)) throw ConfigError(entry.where + ": unknown key '" + key + "'");
  }

  [[nodiscard]] std::string where(const std::string& key) const {
    const auto* e = find(key);
    return e ? e->where : key;
  }

 private:
  struct Entry {
    std::string raw;
    std::string where;
  };

  const Entry* find(const std::string& key) const {
    consumed_.insert(key);
    const auto it = values_.find(key);
    return it == values_.end() ? nullptr : &it->second;
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static std::string strip_comment(const std::string& s) {
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '"') quoted = !quoted;
      if (s[i] == '#' && !quoted) return s.substr(0, i);
    }
    return s;
  }

  static std::string unquote(const std::string& s) {
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
    return s;
  }

  static double to_double(const std::string& v, const Entry& e, const std::string& key) {
    std::size_t used = 0;
    double out = 0.0;
    try {
      out = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (v.empty() || used != v.size()) throw ConfigError(e.where + ": '" + key + "' must be a number, got '" + v + "'");
    return out;
  }

  static std::uint64_t to_size(const std::string& v, const Entry& e, const std::string& key) {
    std::size_t used = 0;
    unsigned long long out = 0;
    try {
      if (!v.empty() && v.front() != '-') out = std::stoull(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (v.empty() || used != v.size())
      throw ConfigError(e.where + ": '" + key + "' must be a nonnegative integer, got '" + v + "'");
    return out;
  }

  std::map<std::string, Entry> values_;
  mutable std::set<std::string> consumed_;
};

}  // namespace fwdalloc
