#pragma once

// key=value text files with '#' comments, used for run and camera configs.

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>

#include "ccnext/error.hpp"

namespace ccnext {

class KeyValueFile {
 public:
  KeyValueFile() = default;

  static KeyValueFile parse(std::istream& is, const std::string& origin) {
    KeyValueFile kv;
    kv.origin_ = origin;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw IoError(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
      const std::string key = trim(line.substr(0, eq));
      if (key.empty()) throw IoError(origin + ":" + std::to_string(lineno) + ": empty key");
      if (kv.values_.count(key)) throw IoError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
      kv.values_[key] = trim(line.substr(eq + 1));
      kv.lines_[key] = lineno;
    }
    return kv;
  }

  static KeyValueFile load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config '" + path + "'");
    return parse(is, path);
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return values_; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::string get_string(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw IoError(origin_ + ": missing key '" + key + "'");
    return it->second;
  }
  std::string get_string(const std::string& key, const std::string& fallback) const {
    return has(key) ? get_string(key) : fallback;
  }

  double get_double(const std::string& key) const { return convert<double>(key, [](const std::string& s, std::size_t* p) { return std::stod(s, p); }); }
  double get_double(const std::string& key, double fallback) const { return has(key) ? get_double(key) : fallback; }

  long long get_int(const std::string& key) const { return convert<long long>(key, [](const std::string& s, std::size_t* p) { return std::stoll(s, p); }); }
  long long get_int(const std::string& key, long long fallback) const { return has(key) ? get_int(key) : fallback; }

  bool get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string v = get_string(key);
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw IoError(where(key) + ": '" + key + "' expects a boolean, got '" + v + "'");
  }

  /// Throws on keys outside `known`, which usually means a typo.
  void reject_unknown(const std::set<std::string>& known) const {
    for (const auto& [k, v] : values_)
      if (!known.count(k)) throw IoError(where(k) + ": unknown key '" + k + "'");
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::string where(const std::string& key) const {
    auto it = lines_.find(key);
    return it == lines_.end() ? origin_ : origin_ + ":" + std::to_string(it->second);
  }

  template <class V, class F>
  V convert(const std::string& key, F f) const {
    const std::string s = get_string(key);
    try {
      std::size_t used = 0;
      V v = f(s, &used);
      if (used != s.size()) throw std::invalid_argument("trailing characters");
      return v;
    } catch (const std::exception&) {
      throw IoError(where(key) + ": '" + key + "' has invalid numeric value '" + s + "'");
    }
  }

  std::string origin_ = "<config>";
  std::map<std::string, std::string> values_;
  std::map<std::string, int> lines_;
};

}  // namespace ccnext
