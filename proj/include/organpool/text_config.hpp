// Minimal line-oriented "[section]" / "key = value" text format shared by
// schema files, experiment configs, and scalar-stat files.
#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "organpool/core.hpp"

namespace organpool {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

struct TextEntry {
    std::string key;
    std::string value;  // empty when the line has no '='
    bool has_value = false;
    std::size_t line = 0;
};

struct TextSection {
    std::string name;
    std::vector<TextEntry> entries;
};

/// Parses sections in file order. Entries before the first header land in a
/// section with an empty name. '#' starts a comment.
inline std::vector<TextSection> parse_sections(std::string_view text, ErrorKind on_error = ErrorKind::config) {
    std::vector<TextSection> sections(1);
    std::istringstream in{std::string(text)};
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const auto hash = raw.find('#');
        const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') fail(on_error, "line " + std::to_string(line_no) + ": unterminated section header");
            sections.push_back(TextSection{trim(line.substr(1, line.size() - 2)), {}});
            continue;
        }
        TextEntry e;
        e.line = line_no;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            e.key = line;
        } else {
            e.key = trim(line.substr(0, eq));
            e.value = trim(line.substr(eq + 1));
            e.has_value = true;
            if (e.key.empty()) fail(on_error, "line " + std::to_string(line_no) + ": empty key");
        }
        sections.back().entries.push_back(std::move(e));
    }
    return sections;
}

inline std::string read_text_file(const std::string& path, ErrorKind on_error = ErrorKind::data) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(on_error, "cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::string& path, std::string_view text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::data, "cannot write '" + path + "'");
    out << text;
}

/// Flat key/value view of a sectionless file; later keys override earlier.
class KeyValues {
public:
    KeyValues() = default;
    explicit KeyValues(std::string_view text) {
        for (const auto& sec : parse_sections(text)) {
            for (const auto& e : sec.entries) {
                if (!e.has_value) fail(ErrorKind::config, "line " + std::to_string(e.line) + ": expected key = value");
                const std::string key = sec.name.empty() ? e.key : sec.name + "." + e.key;
                values_[key] = e.value;
            }
        }
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
    const std::map<std::string, std::string>& all() const { return values_; }

    std::string get(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t used = 0;
            const double v = std::stod(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            fail(ErrorKind::config, "key '" + key + "' is not a number: '" + it->second + "'");
        }
    }

    long get_int(const std::string& key, long fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t used = 0;
            const long v = std::stol(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            fail(ErrorKind::config, "key '" + key + "' is not an integer: '" + it->second + "'");
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        fail(ErrorKind::config, "key '" + key + "' is not a boolean: '" + it->second + "'");
    }

private:
    std::map<std::string, std::string> values_;
};

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace organpool
