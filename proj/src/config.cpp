#include "cpqe/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cpqe {

namespace {
std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}
}  // namespace

KvConfig KvConfig::parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_string(ss.str());
}

KvConfig KvConfig::parse_string(const std::string& text) {
  KvConfig c;
  c.text_ = text;
  std::istringstream f(text);
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config line " + std::to_string(lineno) +
                               ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error("config line " + std::to_string(lineno) +
                               ": empty key");
    c.kv_[key] = val;
  }
  return c;
}

bool KvConfig::has(const std::string& key) const { return kv_.count(key) > 0; }

std::string KvConfig::get(const std::string& key, const std::string& def) const {
  const auto it = kv_.find(key);
  return it == kv_.end() ? def : it->second;
}

long KvConfig::get_long(const std::string& key, long def) const {
  const auto it = kv_.find(key);
  return it == kv_.end() ? def : std::stol(it->second);
}

double KvConfig::get_double(const std::string& key, double def) const {
  const auto it = kv_.find(key);
  return it == kv_.end() ? def : std::stod(it->second);
}

std::uint64_t KvConfig::get_u64(const std::string& key, std::uint64_t def) const {
  const auto it = kv_.find(key);
  return it == kv_.end() ? def : std::stoull(it->second);
}

std::vector<int> KvConfig::get_int_list(const std::string& key,
                                        const std::vector<int>& def) const {
  const auto it = kv_.find(key);
  if (it == kv_.end()) return def;
  std::vector<int> out;
  std::istringstream ss(it->second);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(std::stoi(tok));
  }
  if (out.empty()) return def;
  return out;
}

void KvConfig::set(const std::string& key, const std::string& value) {
  kv_[key] = value;
}

}  // namespace cpqe
