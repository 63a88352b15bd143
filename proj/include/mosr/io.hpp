// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mosr/common.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace mosr {

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

// Shortest round-trip decimal form of a double.
std::string format_double(double value);

std::vector<int> parse_int_list(const std::string& text);
std::string join_ints(const std::vector<int>& values, const std::string& sep = ",");

// Flat `key = value` document. `#` starts a comment; blank lines are ignored.
class KeyValueConfig {
public:
    static KeyValueConfig parse(const std::string& text);
    static KeyValueConfig load(const std::filesystem::path& path);

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    const std::string& get(const std::string& key) const;

    std::string get_or(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    long long get_int(const std::string& key, long long fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    const std::map<std::string, std::string>& values() const { return values_; }

    // Keys not in `known`; callers reject typos with this.
    std::vector<std::string> unknown_keys(const std::vector<std::string>& known) const;

    std::string to_string() const;

private:
    std::map<std::string, std::string> values_;
};

}  // namespace mosr
