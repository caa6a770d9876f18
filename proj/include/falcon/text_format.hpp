#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace falcon {

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// One `[name]` section of the shared key-value text format used by model
/// and config files. Key order is preserved; duplicate keys within a section
/// are rejected at parse time.
class Section {
 public:
  Section(std::string name, int line) : name_(std::move(name)), line_(line) {}

  const std::string& name() const { return name_; }
  int line() const { return line_; }

  void add(const std::string& key, const std::string& value, int line) {
    if (index_.count(key)) {
      throw ParseError("duplicate key '" + key + "' in [" + name_ +
                       "] at line " + std::to_string(line));
    }
    index_[key] = entries_.size();
    entries_.push_back({key, value, line});
  }

  bool has(const std::string& key) const { return index_.count(key) != 0; }

  const std::string& raw(const std::string& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) {
      throw ParseError("missing key '" + key + "' in [" + name_ +
                       "] section at line " + std::to_string(line_));
    }
    consumed_.insert(key);
    return entries_[it->second].value;
  }

  std::string get_string(const std::string& key) const { return raw(key); }

  double get_scalar(const std::string& key) const {
    return parse_double(raw(key), key);
  }

  int get_int(const std::string& key) const {
    double v = get_scalar(key);
    int i = static_cast<int>(v);
    if (static_cast<double>(i) != v) {
      throw ParseError("key '" + key + "' in [" + name_ +
                       "] must be an integer, got '" + raw(key) + "'");
    }
    return i;
  }

  bool get_bool(const std::string& key) const {
    const std::string& v = raw(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ParseError("key '" + key + "' in [" + name_ +
                     "] must be true/false, got '" + v + "'");
  }

  Eigen::VectorXd get_vector(const std::string& key) const {
    std::istringstream ss(raw(key));
    std::vector<double> vals;
    std::string tok;
    while (ss >> tok) vals.push_back(parse_double(tok, key));
    Eigen::VectorXd out(static_cast<Eigen::Index>(vals.size()));
    for (size_t i = 0; i < vals.size(); ++i) out[static_cast<Eigen::Index>(i)] = vals[i];
    return out;
  }

  Eigen::Vector3d get_vec3(const std::string& key) const {
    Eigen::VectorXd v = get_vector(key);
    if (v.size() != 3) {
      throw ParseError("key '" + key + "' in [" + name_ + "] needs 3 values, got " +
                       std::to_string(v.size()));
    }
    return v.head<3>();
  }

  std::pair<double, double> get_pair(const std::string& key) const {
    Eigen::VectorXd v = get_vector(key);
    if (v.size() != 2) {
      throw ParseError("key '" + key + "' in [" + name_ + "] needs 2 values, got " +
                       std::to_string(v.size()));
    }
    return {v[0], v[1]};
  }

  /// Unknown keys are a hard error: every consumer calls this after reading
  /// the keys it understands.
  void reject_unconsumed() const {
    for (const auto& e : entries_) {
      if (!consumed_.count(e.key)) {
        throw ParseError("unknown key '" + e.key + "' in [" + name_ +
                         "] at line " + std::to_string(e.line));
      }
    }
  }

  std::vector<std::string> keys() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) out.push_back(e.key);
    return out;
  }

 private:
  static double parse_double(const std::string& text, const std::string& key) {
    size_t pos = 0;
    double v = 0.0;
    try {
      v = std::stod(text, &pos);
    } catch (const std::exception&) {
      throw ParseError("key '" + key + "' has non-numeric value '" + text + "'");
    }
    if (pos != text.size()) {
      throw ParseError("key '" + key + "' has trailing junk in value '" + text + "'");
    }
    return v;
  }

  struct Entry {
    std::string key, value;
    int line;
  };
  std::string name_;
  int line_;
  std::vector<Entry> entries_;
  std::map<std::string, size_t> index_;
  mutable std::set<std::string> consumed_;
};

inline std::vector<Section> parse_sections(const std::string& text) {
  std::vector<Section> sections;
  std::istringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    // strip comments and surrounding whitespace
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    size_t begin = line.find_first_not_of(" \t\r");
    if (begin == std::string::npos) continue;
    size_t end = line.find_last_not_of(" \t\r");
    line = line.substr(begin, end - begin + 1);

    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ParseError("malformed section header at line " + std::to_string(lineno));
      }
      sections.emplace_back(line.substr(1, line.size() - 2), lineno);
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError("expected 'key = value' at line " + std::to_string(lineno));
    }
    if (sections.empty()) {
      throw ParseError("key outside any section at line " + std::to_string(lineno));
    }
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    auto trim = [](std::string& s) {
      size_t b = s.find_first_not_of(" \t");
      size_t e = s.find_last_not_of(" \t");
      s = (b == std::string::npos) ? std::string() : s.substr(b, e - b + 1);
    };
    trim(key);
    trim(value);
    if (key.empty()) throw ParseError("empty key at line " + std::to_string(lineno));
    sections.back().add(key, value, lineno);
  }
  return sections;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open file: " + path);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << text;
}

/// Shortest decimal form that round-trips the exact double.
inline std::string format_double(double v) {
  char buf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::stod(buf) == v) return buf;
  }
  return buf;
}

inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hash_hex(const std::string& bytes) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(bytes)));
  return buf;
}

}  // namespace falcon
