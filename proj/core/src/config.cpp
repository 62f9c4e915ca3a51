#include "motok/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "motok/rng.hpp"

namespace motok {

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

} // namespace

Config Config::parse(const std::string& text) {
    Config c;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t cpos = line.find_first_of("#;");
        if (cpos != std::string::npos) line = line.substr(0, cpos);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("config line " + std::to_string(lineno) + ": unterminated section");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        c.kv_[section.empty() ? key : section + "." + key] = val;
    }
    return c;
}

Config Config::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

std::vector<std::string> Config::keys_in(const std::string& section) const {
    std::vector<std::string> out;
    const std::string prefix = section + ".";
    for (const auto& [k, v] : kv_)
        if (k.rfind(prefix, 0) == 0) out.push_back(k.substr(prefix.size()));
    return out;
}

std::string Config::get_str(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw ConfigError("missing config key: " + key);
    return it->second;
}

std::string Config::get_str(const std::string& key, const std::string& dflt) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? dflt : it->second;
}

int64_t Config::get_int(const std::string& key) const {
    const std::string s = get_str(key);
    int64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        throw ConfigError("config key " + key + ": not an integer: " + s);
    return v;
}

int64_t Config::get_int(const std::string& key, int64_t dflt) const {
    return has(key) ? get_int(key) : dflt;
}

double Config::get_double(const std::string& key) const {
    const std::string s = get_str(key);
    try {
        size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": not a number: " + s);
    }
}

double Config::get_double(const std::string& key, double dflt) const {
    return has(key) ? get_double(key) : dflt;
}

bool Config::get_bool(const std::string& key, bool dflt) const {
    if (!has(key)) return dflt;
    const std::string s = get_str(key);
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError("config key " + key + ": not a boolean: " + s);
}

std::vector<int> Config::get_int_list(const std::string& key) const {
    const std::string s = get_str(key);
    std::vector<int> out;
    std::istringstream in(s);
    std::string tok;
    while (std::getline(in, tok, ',')) {
        tok = trim(tok);
        if (tok.empty()) continue;
        try {
            out.push_back(std::stoi(tok));
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + ": not an int list: " + s);
        }
    }
    if (out.empty()) throw ConfigError("config key " + key + ": empty list");
    return out;
}

std::vector<int> Config::get_int_list(const std::string& key, const std::vector<int>& dflt) const {
    return has(key) ? get_int_list(key) : dflt;
}

std::pair<double, double> Config::get_range(const std::string& key,
                                            std::pair<double, double> dflt) const {
    if (!has(key)) return dflt;
    const std::string s = get_str(key);
    size_t pos = s.find("..");
    try {
        if (pos == std::string::npos) {
            double v = std::stod(s);
            return {v, v};
        }
        double lo = std::stod(s.substr(0, pos));
        double hi = std::stod(s.substr(pos + 2));
        if (hi < lo) throw std::invalid_argument(s);
        return {lo, hi};
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": bad range: " + s);
    }
}

void Config::set_double(const std::string& key, double v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    kv_[key] = ss.str();
}

std::string Config::canonical_text() const {
    // std::map keeps keys sorted; group by section for readability
    std::ostringstream out;
    std::string cur_section = "\x01"; // sentinel unequal to any real section
    for (const auto& [k, v] : kv_) {
        size_t dot = k.rfind('.');
        std::string section = dot == std::string::npos ? "" : k.substr(0, dot);
        std::string key = dot == std::string::npos ? k : k.substr(dot + 1);
        if (section != cur_section) {
            if (!section.empty()) out << "[" << section << "]\n";
            cur_section = section;
        }
        out << key << " = " << v << "\n";
    }
    return out.str();
}

uint64_t Config::hash() const { return hash_string(canonical_text()); }

} // namespace motok
