#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace hfgd {

// Ordered key=value store backing config files, checkpoint metadata and run
// manifests. Lines starting with '#' and blank lines are ignored on parse and
// preserved nowhere; serialization is one `key=value` per line.
class KeyValues {
public:
    static KeyValues parse(const std::string& text);

    std::string serialize() const;

    bool has(const std::string& key) const;
    const std::string& get(const std::string& key) const;
    std::string get_or(const std::string& key, const std::string& fallback) const;
    void set(const std::string& key, const std::string& value);

    std::int64_t get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<int> get_int_list(const std::string& key) const;  // comma-separated

    void set_int(const std::string& key, std::int64_t v);
    void set_double(const std::string& key, double v);
    void set_bool(const std::string& key, bool v);
    void set_int_list(const std::string& key, const std::vector<int>& v);

    const std::vector<std::pair<std::string, std::string>>& items() const {
        return items_;
    }

    // shortest decimal form that round-trips the exact double
    static std::string format_double(double v);

private:
    std::vector<std::pair<std::string, std::string>> items_;
};

}  // namespace hfgd
