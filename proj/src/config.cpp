#include "cavia/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "cavia/errors.hpp"

namespace cavia {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

double parse_double_strict(const std::string& text, const std::string& what) {
    double v = 0.0;
    const std::string t = trim(text);
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc() || ptr != t.data() + t.size())
        throw ConfigError(what + ": expected a number, got '" + text + "'");
    return v;
}

long parse_long_strict(const std::string& text, const std::string& what) {
    long v = 0;
    const std::string t = trim(text);
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc() || ptr != t.data() + t.size())
        throw ConfigError(what + ": expected an integer, got '" + text + "'");
    return v;
}

KeyValues KeyValues::parse(std::istream& is, const std::string& origin) {
    KeyValues kv;
    std::string line;
    for (int lineno = 1; std::getline(is, line); ++lineno) {
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = trim(t.substr(0, eq));
        if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
        kv.set(key, trim(t.substr(eq + 1)));
    }
    return kv;
}

KeyValues KeyValues::parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    return parse(is, path);
}

void KeyValues::set(const std::string& key, std::string value) {
    for (auto& [k, v] : entries_)
        if (k == key) {
            v = std::move(value);
            return;
        }
    entries_.emplace_back(key, std::move(value));
}

bool KeyValues::contains(const std::string& key) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == key; });
}

const std::string& KeyValues::get(const std::string& key) const {
    for (const auto& [k, v] : entries_)
        if (k == key) return v;
    throw ConfigError("missing configuration key " + key);
}

std::string KeyValues::get_or(const std::string& key, const std::string& fallback) const {
    return contains(key) ? get(key) : fallback;
}

double KeyValues::get_double(const std::string& key, double fallback) const {
    return contains(key) ? parse_double_strict(get(key), key) : fallback;
}

long KeyValues::get_long(const std::string& key, long fallback) const {
    return contains(key) ? parse_long_strict(get(key), key) : fallback;
}

bool KeyValues::get_bool(const std::string& key, bool fallback) const {
    if (!contains(key)) return fallback;
    const std::string& v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

std::vector<double> KeyValues::get_list(const std::string& key, std::vector<double> fallback) const {
    if (!contains(key)) return fallback;
    std::vector<double> out;
    std::string item;
    std::istringstream is(get(key));
    while (std::getline(is, item, ','))
        if (!trim(item).empty()) out.push_back(parse_double_strict(item, key));
    return out;
}

void KeyValues::require_known(const std::vector<std::string>& known) const {
    for (const auto& [k, v] : entries_)
        if (std::find(known.begin(), known.end(), k) == known.end())
            throw ConfigError("unknown configuration key '" + k + "'");
}

std::string KeyValues::to_string() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
    return out;
}

}  // namespace cavia
