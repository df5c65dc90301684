#include "hfgd/config.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <stdexcept>

namespace hfgd {

static std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

KeyValues KeyValues::parse(const std::string& text) {
    KeyValues kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const size_t eq = t.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw std::runtime_error("config: line " + std::to_string(lineno) +
                                     " is not key=value: '" + t + "'");
        }
        kv.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return kv;
}

std::string KeyValues::serialize() const {
    std::ostringstream os;
    for (const auto& [k, v] : items_) os << k << '=' << v << '\n';
    return os.str();
}

bool KeyValues::has(const std::string& key) const {
    for (const auto& [k, v] : items_) {
        if (k == key) return true;
    }
    return false;
}

const std::string& KeyValues::get(const std::string& key) const {
    for (const auto& [k, v] : items_) {
        if (k == key) return v;
    }
    throw std::runtime_error("config: missing key '" + key + "'");
}

std::string KeyValues::get_or(const std::string& key, const std::string& fallback) const {
    for (const auto& [k, v] : items_) {
        if (k == key) return v;
    }
    return fallback;
}

void KeyValues::set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : items_) {
        if (k == key) {
            v = value;
            return;
        }
    }
    items_.emplace_back(key, value);
}

std::int64_t KeyValues::get_int(const std::string& key) const {
    const std::string& s = get(key);
    errno = 0;
    char* end = nullptr;
    const long long v = std::strtoll(s.c_str(), &end, 10);
    if (errno != 0 || end == s.c_str() || *end != '\0') {
        throw std::runtime_error("config: key '" + key + "' is not an integer: '" + s + "'");
    }
    return v;
}

double KeyValues::get_double(const std::string& key) const {
    const std::string& s = get(key);
    errno = 0;
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (errno != 0 || end == s.c_str() || *end != '\0') {
        throw std::runtime_error("config: key '" + key + "' is not a number: '" + s + "'");
    }
    return v;
}

bool KeyValues::get_bool(const std::string& key) const {
    const std::string& s = get(key);
    if (s == "1" || s == "true") return true;
    if (s == "0" || s == "false") return false;
    throw std::runtime_error("config: key '" + key + "' is not a bool (use 0/1): '" + s + "'");
}

std::vector<int> KeyValues::get_int_list(const std::string& key) const {
    const std::string& s = get(key);
    std::vector<int> out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        tok = trim(tok);
        errno = 0;
        char* end = nullptr;
        const long v = std::strtol(tok.c_str(), &end, 10);
        if (errno != 0 || end == tok.c_str() || *end != '\0') {
            throw std::runtime_error("config: key '" + key + "' has a non-integer item: '" +
                                     tok + "'");
        }
        out.push_back(static_cast<int>(v));
    }
    if (out.empty()) {
        throw std::runtime_error("config: key '" + key + "' is an empty list");
    }
    return out;
}

void KeyValues::set_int(const std::string& key, std::int64_t v) {
    set(key, std::to_string(v));
}

void KeyValues::set_double(const std::string& key, double v) {
    set(key, format_double(v));
}

void KeyValues::set_bool(const std::string& key, bool v) { set(key, v ? "1" : "0"); }

void KeyValues::set_int_list(const std::string& key, const std::vector<int>& v) {
    std::ostringstream os;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) os << ',';
        os << v[i];
    }
    set(key, os.str());
}

std::string KeyValues::format_double(double v) {
    // try increasing precision until the text parses back to the same bits
    char buf[64];
    for (int prec = 15; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

}  // namespace hfgd
