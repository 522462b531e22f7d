#pragma once

#include <istream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "jseg/common.hpp"

namespace jseg {

// Sectioned key = value text. '#' and ';' start comments. Every key must be
// consumed by a getter (or a registered prefix) before finish() is called;
// leftovers are reported with their line number and the valid keys for the
// section, so typos fail loudly instead of being ignored.
class Config {
public:
    Config() = default;

    static Config parse(std::istream& in, const std::string& origin = "config") {
        Config cfg;
        cfg.origin_ = origin;
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string s = strip_comment(line);
            std::size_t a = s.find_first_not_of(" \t\r");
            if (a == std::string::npos) continue;
            std::size_t b = s.find_last_not_of(" \t\r");
            s = s.substr(a, b - a + 1);
            if (s.front() == '[') {
                if (s.back() != ']')
                    throw config_error(origin + " line " + std::to_string(lineno) +
                                       ": unterminated section header");
                section = s.substr(1, s.size() - 2);
                continue;
            }
            std::size_t eq = s.find('=');
            if (eq == std::string::npos)
                throw config_error(origin + " line " + std::to_string(lineno) +
                                   ": expected 'key = value'");
            std::string key = trim(s.substr(0, eq));
            std::string value = trim(s.substr(eq + 1));
            if (key.empty())
                throw config_error(origin + " line " + std::to_string(lineno) + ": empty key");
            auto& slot = cfg.values_[section][key];
            if (slot.line != 0)
                throw config_error(origin + " line " + std::to_string(lineno) + ": duplicate key '" +
                                   key + "' (first set on line " + std::to_string(slot.line) + ")");
            slot.value = value;
            slot.line = lineno;
        }
        return cfg;
    }

    bool has(const std::string& section, const std::string& key) const {
        auto s = values_.find(section);
        return s != values_.end() && s->second.count(key) > 0;
    }

    std::string get_string(const std::string& section, const std::string& key,
                           const std::string& fallback) {
        note_valid(section, key);
        auto* e = find(section, key);
        return e ? e->value : fallback;
    }

    double get_double(const std::string& section, const std::string& key, double fallback) {
        note_valid(section, key);
        auto* e = find(section, key);
        if (!e) return fallback;
        return parse_double(e->value, section, key, e->line);
    }

    int get_int(const std::string& section, const std::string& key, int fallback) {
        note_valid(section, key);
        auto* e = find(section, key);
        if (!e) return fallback;
        try {
            std::size_t pos = 0;
            int v = std::stoi(e->value, &pos);
            if (pos != e->value.size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw config_error(where(section, key, e->line) + ": expected an integer, got '" +
                               e->value + "'");
        }
    }

    bool get_bool(const std::string& section, const std::string& key, bool fallback) {
        note_valid(section, key);
        auto* e = find(section, key);
        if (!e) return fallback;
        if (e->value == "true" || e->value == "1" || e->value == "yes") return true;
        if (e->value == "false" || e->value == "0" || e->value == "no") return false;
        throw config_error(where(section, key, e->line) + ": expected true/false, got '" +
                           e->value + "'");
    }

    std::vector<double> get_doubles(const std::string& section, const std::string& key) {
        note_valid(section, key);
        auto* e = find(section, key);
        std::vector<double> out;
        if (!e) return out;
        std::istringstream ss(e->value);
        std::string tok;
        while (ss >> tok) out.push_back(parse_double(tok, section, key, e->line));
        return out;
    }

    // Enumerate keys in a section that start with a prefix (e.g. "M.");
    // marks the whole prefix as valid.
    std::vector<std::pair<std::string, std::string>> prefixed(const std::string& section,
                                                              const std::string& prefix) {
        valid_[section].insert(prefix + "*");
        prefixes_[section].insert(prefix);
        std::vector<std::pair<std::string, std::string>> out;
        auto s = values_.find(section);
        if (s == values_.end()) return out;
        for (const auto& [k, v] : s->second)
            if (k.rfind(prefix, 0) == 0) out.emplace_back(k.substr(prefix.size()), v.value);
        return out;
    }

    // Every stored key must have been requested by now.
    void finish() const {
        for (const auto& [section, entries] : values_) {
            for (const auto& [key, e] : entries) {
                if (consumed(section, key)) continue;
                std::string msg = origin_ + " line " + std::to_string(e.line) + ": unknown key '" +
                                  key + "' in section [" + section + "]";
                auto v = valid_.find(section);
                if (v != valid_.end() && !v->second.empty()) {
                    msg += "; valid keys:";
                    for (const auto& k : v->second) msg += " " + k;
                } else {
                    msg += "; no keys are defined for this section";
                }
                throw config_error(msg);
            }
        }
    }

private:
    struct Entry {
        std::string value;
        int line = 0;
    };

    static std::string strip_comment(const std::string& s) {
        std::size_t p = s.find_first_of("#;");
        return p == std::string::npos ? s : s.substr(0, p);
    }
    static std::string trim(const std::string& s) {
        std::size_t a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return "";
        std::size_t b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
    }

    const Entry* find(const std::string& section, const std::string& key) const {
        auto s = values_.find(section);
        if (s == values_.end()) return nullptr;
        auto k = s->second.find(key);
        return k == s->second.end() ? nullptr : &k->second;
    }

    void note_valid(const std::string& section, const std::string& key) {
        valid_[section].insert(key);
    }

    bool consumed(const std::string& section, const std::string& key) const {
        auto v = valid_.find(section);
        if (v != valid_.end() && v->second.count(key)) return true;
        auto p = prefixes_.find(section);
        if (p != prefixes_.end())
            for (const auto& pre : p->second)
                if (key.rfind(pre, 0) == 0) return true;
        return false;
    }

    double parse_double(const std::string& tok, const std::string& section, const std::string& key,
                        int line) const {
        try {
            std::size_t pos = 0;
            double v = std::stod(tok, &pos);
            if (pos != tok.size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw config_error(where(section, key, line) + ": expected a number, got '" + tok + "'");
        }
    }

    std::string where(const std::string& section, const std::string& key, int line) const {
        return origin_ + " line " + std::to_string(line) + ": [" + section + "] " + key;
    }

    std::string origin_ = "config";
    std::map<std::string, std::map<std::string, Entry>> values_;
    std::map<std::string, std::set<std::string>> valid_;
    std::map<std::string, std::set<std::string>> prefixes_;
};

} // namespace jseg
