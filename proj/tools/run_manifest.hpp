#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace tinylm::cli {

std::string sha256_hex(std::string_view bytes);
// A file hashes its bytes; a directory hashes the sorted list of
// (relative path, file digest) pairs of the regular files below it.
std::string digest_path(const std::filesystem::path& path);
// UTC, second resolution: 2024-05-01T12:00:00Z
std::string utc_timestamp();

struct RunManifest {
    std::string command;
    std::string version;
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, std::string>> config;  // resolved option values
    std::vector<std::pair<std::string, std::string>> inputs;  // path -> sha256
    std::string started;
    std::string finished;

    std::string to_json() const;
};

}  // namespace tinylm::cli
