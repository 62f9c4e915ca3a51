#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "motok/errors.hpp"

namespace motok {

// Flat sectioned key = value text. '#' and ';' start comments. Keys are
// addressed as "section.key"; keys before any section header live in "".
class Config {
  public:
    Config() = default;

    static Config parse(const std::string& text);
    static Config load_file(const std::string& path);

    bool has(const std::string& key) const { return kv_.count(key) > 0; }
    std::vector<std::string> keys_in(const std::string& section) const;

    std::string get_str(const std::string& key) const;
    std::string get_str(const std::string& key, const std::string& dflt) const;
    int64_t get_int(const std::string& key) const;
    int64_t get_int(const std::string& key, int64_t dflt) const;
    double get_double(const std::string& key) const;
    double get_double(const std::string& key, double dflt) const;
    bool get_bool(const std::string& key, bool dflt) const;
    // comma-separated ints, e.g. "4,4,2,2,2,2"
    std::vector<int> get_int_list(const std::string& key) const;
    std::vector<int> get_int_list(const std::string& key, const std::vector<int>& dflt) const;
    // "lo..hi" inclusive range; a single number means lo == hi
    std::pair<double, double> get_range(const std::string& key,
                                        std::pair<double, double> dflt) const;

    void set(const std::string& key, const std::string& value) { kv_[key] = value; }
    void set_int(const std::string& key, int64_t v) { kv_[key] = std::to_string(v); }
    void set_double(const std::string& key, double v);

    // Canonical text: sections sorted, keys sorted, one "key = value" per line.
    std::string canonical_text() const;
    uint64_t hash() const;

  private:
    std::map<std::string, std::string> kv_;
};

} // namespace motok
