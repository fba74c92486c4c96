#include "tinylm/kvfile.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "tinylm/error.hpp"

namespace tinylm {

std::string trim(std::string_view text) {
    const char* ws = " \t\r\n\f\v";
    const auto b = text.find_first_not_of(ws);
    if (b == std::string_view::npos) return {};
    const auto e = text.find_last_not_of(ws);
    return std::string(text.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view text, char sep) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const auto pos = text.find(sep, start);
        if (pos == std::string_view::npos) {
            parts.emplace_back(text.substr(start));
            return parts;
        }
        parts.emplace_back(text.substr(start, pos - start));
        start = pos + 1;
    }
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) fail(ErrorKind::io, "read failed: " + path.string());
    return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view content) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot write " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) fail(ErrorKind::io, "write failed: " + path.string());
}

std::string format_double(double value) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, value);
    return std::string(buf, res.ptr);
}

std::string format_float(float value) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, value);
    return std::string(buf, res.ptr);
}

KeyValueFile KeyValueFile::parse(std::string_view text, std::string source) {
    KeyValueFile kv;
    kv.source_ = std::move(source);
    std::size_t line_no = 0;
    for (const auto& raw : split(text, '\n')) {
        ++line_no;
        std::string line = raw;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            fail(ErrorKind::config, kv.source_ + ":" + std::to_string(line_no) + ": expected key = value");
        }
        std::string key = trim(std::string_view(line).substr(0, eq));
        std::string value = trim(std::string_view(line).substr(eq + 1));
        if (key.empty()) fail(ErrorKind::config, kv.source_ + ":" + std::to_string(line_no) + ": empty key");
        if (!kv.values_.emplace(key, value).second) {
            fail(ErrorKind::config, kv.source_ + ": duplicate key '" + key + "'");
        }
    }
    return kv;
}

KeyValueFile KeyValueFile::load(const std::filesystem::path& path) {
    return parse(read_file(path), path.string());
}

std::optional<std::string> KeyValueFile::take(const std::string& key) {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    taken_.insert(key);
    return it->second;
}

std::string KeyValueFile::take_string(const std::string& key, const std::string& fallback) {
    return take(key).value_or(fallback);
}

std::string KeyValueFile::require_string(const std::string& key) {
    auto v = take(key);
    if (!v) fail(ErrorKind::config, source_ + ": missing key '" + key + "'");
    return *v;
}

std::int64_t KeyValueFile::take_int(const std::string& key, std::int64_t fallback) {
    auto v = take(key);
    if (!v) return fallback;
    std::int64_t out = 0;
    auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc() || ptr != v->data() + v->size()) {
        fail(ErrorKind::config, source_ + ": '" + key + "' is not an integer: " + *v);
    }
    return out;
}

double KeyValueFile::take_double(const std::string& key, double fallback) {
    auto v = take(key);
    if (!v) return fallback;
    double out = 0;
    auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc() || ptr != v->data() + v->size()) {
        fail(ErrorKind::config, source_ + ": '" + key + "' is not a number: " + *v);
    }
    return out;
}

bool KeyValueFile::take_bool(const std::string& key, bool fallback) {
    auto v = take(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes") return true;
    if (*v == "false" || *v == "0" || *v == "no") return false;
    fail(ErrorKind::config, source_ + ": '" + key + "' is not a boolean: " + *v);
}

void KeyValueFile::finish() const {
    for (const auto& [key, value] : values_) {
        if (!taken_.count(key)) fail(ErrorKind::config, source_ + ": unknown key '" + key + "'");
    }
}

std::string format_key_values(const std::vector<std::pair<std::string, std::string>>& entries) {
    std::string out;
    for (const auto& [k, v] : entries) out += k + " = " + v + "\n";
    return out;
}

}  // namespace tinylm
