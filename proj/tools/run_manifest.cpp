#include "run_manifest.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <memory>

#include <json.hpp>
#include <openssl/evp.h>

#include "tinylm/error.hpp"
#include "tinylm/kvfile.hpp"

namespace tinylm::cli {

std::string sha256_hex(std::string_view bytes) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int length = 0;
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), digest, &length) != 1) {
        fail(ErrorKind::io, "sha256 computation failed");
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < length; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 15];
    }
    return out;
}

std::string digest_path(const std::filesystem::path& path) {
    std::error_code ec;
    if (!std::filesystem::is_directory(path, ec)) return sha256_hex(read_file(path));
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(path)) {
        if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    std::string listing;
    for (const auto& f : files) {
        listing += std::filesystem::relative(f, path).generic_string() + '\0' + sha256_hex(read_file(f)) + '\n';
    }
    return sha256_hex(listing);
}

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string RunManifest::to_json() const {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["version"] = version;
    j["seed"] = seed;
    j["config"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : config) j["config"][k] = v;
    j["inputs"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : inputs) j["inputs"][k] = v;
    j["started"] = started;
    j["finished"] = finished;
    return j.dump(2) + "\n";
}

}  // namespace tinylm::cli
