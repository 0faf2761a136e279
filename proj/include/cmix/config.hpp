#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>

#include "cmix/error.hpp"

namespace cmix {

// Flat key/value configuration files:
//
//   # comment
//   include defaults.cfg
//   key = value
//
// `include` pulls in another file first, so later keys override included
// ones. Relative paths in values resolve against the directory of the file
// that defined the key.
class ConfigMap {
public:
    struct Entry {
        std::string value;
        std::string source_dir;
    };

    void set(const std::string& key, const std::string& value, const std::string& source_dir = ".") {
        entries_[key] = Entry{value, source_dir};
    }

    bool has(const std::string& key) const { return entries_.count(key) > 0; }

    std::string get_str(const std::string& key) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) throw Error("MissingConfigKey", key);
        return it->second.value;
    }

    std::string get_str(const std::string& key, const std::string& fallback) const {
        auto it = entries_.find(key);
        return it == entries_.end() ? fallback : it->second.value;
    }

    int64_t get_int(const std::string& key) const { return to_int(key, get_str(key)); }
    int64_t get_int(const std::string& key, int64_t fallback) const {
        return has(key) ? get_int(key) : fallback;
    }

    double get_double(const std::string& key) const { return to_double(key, get_str(key)); }
    double get_double(const std::string& key, double fallback) const {
        return has(key) ? get_double(key) : fallback;
    }

    bool get_bool(const std::string& key, bool fallback) const {
        if (!has(key)) return fallback;
        std::string v = get_str(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw Error("InvalidConfigValue", key + "=" + v + " is not a boolean");
    }

    // Path value resolved against the directory of the defining file.
    std::string get_path(const std::string& key) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) throw Error("MissingConfigKey", key);
        std::filesystem::path p(it->second.value);
        if (p.is_absolute()) return p.string();
        return (std::filesystem::path(it->second.source_dir) / p).lexically_normal().string();
    }

    const std::map<std::string, Entry>& entries() const { return entries_; }

private:
    static int64_t to_int(const std::string& key, const std::string& v) {
        try {
            size_t pos = 0;
            int64_t r = std::stoll(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return r;
        } catch (const std::exception&) {
            throw Error("InvalidConfigValue", key + "=" + v + " is not an integer");
        }
    }
    static double to_double(const std::string& key, const std::string& v) {
        try {
            size_t pos = 0;
            double r = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return r;
        } catch (const std::exception&) {
            throw Error("InvalidConfigValue", key + "=" + v + " is not a number");
        }
    }

    std::map<std::string, Entry> entries_;
};

namespace detail {

inline std::string trim(std::string_view s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string_view::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return std::string(s.substr(a, b - a + 1));
}

inline void parse_config_into(const std::string& path, ConfigMap& cfg, int depth) {
    if (depth > 8) throw Error("ConfigIncludeCycle", path);
    std::ifstream in(path);
    if (!in) throw Error("FileNotFound", path);
    std::string dir = std::filesystem::path(path).parent_path().string();
    if (dir.empty()) dir = ".";
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.rfind("include ", 0) == 0) {
            std::filesystem::path inc(trim(t.substr(8)));
            if (!inc.is_absolute()) inc = std::filesystem::path(dir) / inc;
            parse_config_into(inc.string(), cfg, depth + 1);
            continue;
        }
        size_t eq = t.find('=');
        if (eq == std::string::npos) {
            throw Error("MalformedLine", path + ":" + std::to_string(line_no) + ": expected key = value");
        }
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (key.empty()) {
            throw Error("MalformedLine", path + ":" + std::to_string(line_no) + ": empty key");
        }
        cfg.set(key, value, dir);
    }
}

}  // namespace detail

inline ConfigMap parse_config_file(const std::string& path) {
    ConfigMap cfg;
    detail::parse_config_into(path, cfg, 0);
    return cfg;
}

}  // namespace cmix
