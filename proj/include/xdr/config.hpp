#pragma once

// Flat key=value config files: '#' comments, blank lines ignored,
// whitespace around keys and values trimmed.

#include <map>
#include <stdexcept>
#include <string>

namespace xdr {

class KVConfig {
 public:
  KVConfig() = default;
  static KVConfig parse_text(const std::string& text);
  static KVConfig load(const std::string& path);

  bool has(const std::string& key) const { return kv_.count(key) > 0; }
  std::string get_str(const std::string& key, const std::string& fallback) const;
  double get_num(const std::string& key, double fallback) const;
  long get_int(const std::string& key, long fallback) const;
  bool get_flag(const std::string& key, bool fallback) const;

  void set(const std::string& key, const std::string& value) { kv_[key] = value; }
  const std::map<std::string, std::string>& items() const { return kv_; }
  std::string to_text() const;

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace xdr
