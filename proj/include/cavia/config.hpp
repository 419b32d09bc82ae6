#pragma once

// Plain-text `key = value` files. Blank lines and lines starting with '#' are
// ignored; keys keep their file order.

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace cavia {

class KeyValues {
public:
    static KeyValues parse(std::istream& is, const std::string& origin = "<config>");
    static KeyValues parse_file(const std::string& path);

    void set(const std::string& key, std::string value);
    bool contains(const std::string& key) const;
    const std::string& get(const std::string& key) const;
    std::string get_or(const std::string& key, const std::string& fallback) const;

    double get_double(const std::string& key, double fallback) const;
    long get_long(const std::string& key, long fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<double> get_list(const std::string& key, std::vector<double> fallback) const;

    // Throws ConfigError naming the first key not in `known`.
    void require_known(const std::vector<std::string>& known) const;

    const std::vector<std::pair<std::string, std::string>>& entries() const noexcept { return entries_; }
    // Canonical `key = value` text, one entry per line, in insertion order.
    std::string to_string() const;

private:
    std::vector<std::pair<std::string, std::string>> entries_;
};

double parse_double_strict(const std::string& text, const std::string& what);
long parse_long_strict(const std::string& text, const std::string& what);

}  // namespace cavia
