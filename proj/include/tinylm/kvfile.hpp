#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace tinylm {

// `key = value` lines, '#' comments. Readers consume keys with take_*; any key
// left over at finish() is reported as a config error.
class KeyValueFile {
public:
    static KeyValueFile parse(std::string_view text, std::string source = "<memory>");
    static KeyValueFile load(const std::filesystem::path& path);

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    std::optional<std::string> take(const std::string& key);
    std::string take_string(const std::string& key, const std::string& fallback);
    std::string require_string(const std::string& key);
    std::int64_t take_int(const std::string& key, std::int64_t fallback);
    double take_double(const std::string& key, double fallback);
    bool take_bool(const std::string& key, bool fallback);
    void finish() const;

    const std::string& source() const noexcept { return source_; }
    const std::map<std::string, std::string>& values() const noexcept { return values_; }

private:
    std::string source_;
    std::map<std::string, std::string> values_;
    std::set<std::string> taken_;
};

std::string format_key_values(const std::vector<std::pair<std::string, std::string>>& entries);

std::string trim(std::string_view text);
std::vector<std::string> split(std::string_view text, char sep);
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view content);
std::string format_double(double value);
std::string format_float(float value);

}  // namespace tinylm
