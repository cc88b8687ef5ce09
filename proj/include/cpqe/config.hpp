#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace cpqe {

// Flat key=value run configuration with '#' comments.
class KvConfig {
 public:
  static KvConfig parse_file(const std::string& path);
  static KvConfig parse_string(const std::string& text);

  bool has(const std::string& key) const;
  std::string get(const std::string& key, const std::string& def) const;
  long get_long(const std::string& key, long def) const;
  double get_double(const std::string& key, double def) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t def) const;
  std::vector<int> get_int_list(const std::string& key,
                                const std::vector<int>& def) const;

  void set(const std::string& key, const std::string& value);
  const std::map<std::string, std::string>& entries() const { return kv_; }

  // original file contents, kept verbatim for run-directory provenance
  const std::string& text() const { return text_; }

 private:
  std::map<std::string, std::string> kv_;
  std::string text_;
};

}  // namespace cpqe
