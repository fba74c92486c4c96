#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace tinylm {

// Fixed ids of the special tokens; the 256 byte tokens follow at kFirstByteId.
inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kBosId = 2;
inline constexpr int kEosId = 3;
inline constexpr int kMaskId = 4;
inline constexpr int kNumSpecialTokens = 5;
inline constexpr int kFirstByteId = kNumSpecialTokens;
inline constexpr std::size_t kMinVocabSize = 256 + kNumSpecialTokens;

struct TokenizerConfig {
    std::size_t vocab_size = 8000;
    bool lowercase = false;
    // Surface strings for pad, unk, bos, eos, mask, in that order.
    std::vector<std::string> special_tokens = {"<pad>", "<unk>", "<s>", "</s>", "<mask>"};

    void validate() const;
};

struct Merge {
    std::string left;
    std::string right;
    bool operator==(const Merge&) const = default;
};
using MergeList = std::vector<Merge>;

// Printable remapping of raw bytes, so that every token is readable text.
namespace bytemap {
char32_t byte_to_codepoint(unsigned char byte) noexcept;
std::optional<unsigned char> codepoint_to_byte(char32_t cp) noexcept;
std::string encode(std::string_view raw_bytes);
// Inverse of encode; std::nullopt when the string contains a foreign code point.
std::optional<std::string> decode(std::string_view token_string);
}  // namespace bytemap

// Splits on ASCII whitespace. A word keeps one preceding space as its leading
// marker; any other whitespace becomes a pre-token of its own.
std::vector<std::string> pretokenize(std::string_view text);

class Tokenizer {
public:
    Tokenizer() = default;

    static Tokenizer train(std::span<const std::string> lines, const TokenizerConfig& config);
    // Rebuilds from an explicit merge list; vocab is specials, bytes, then products.
    static Tokenizer from_merges(const TokenizerConfig& config, const MergeList& merges);
    static Tokenizer load(const std::filesystem::path& dir);
    void save(const std::filesystem::path& dir) const;

    std::vector<int> encode(std::string_view text) const;
    std::string decode(std::span<const int> ids) const;
    // Token strings (remapped form) of encode(text).
    std::vector<std::string> segment(std::string_view text) const;

    std::size_t vocab_size() const noexcept { return tokens_.size(); }
    const std::string& token(int id) const;
    std::optional<int> find(std::string_view token_string) const;
    bool is_special(int id) const noexcept { return id >= 0 && id < kNumSpecialTokens; }
    const MergeList& merges() const noexcept { return merges_; }
    const TokenizerConfig& config() const noexcept { return config_; }

    static constexpr const char* kVocabFile = "vocab.txt";
    static constexpr const char* kMergesFile = "merges.txt";
    static constexpr const char* kConfigFile = "tokenizer.cfg";

private:
    struct PairHash {
        std::size_t operator()(std::uint64_t key) const noexcept { return std::hash<std::uint64_t>{}(key); }
    };
    struct MergeRule {
        std::size_t rank;
        int product;
    };

    static std::uint64_t pair_key(int left, int right) noexcept {
        return (std::uint64_t(std::uint32_t(left)) << 32) | std::uint32_t(right);
    }
    int add_token(const std::string& token_string);
    void add_merge(const Merge& merge);
    void encode_word(std::string_view word, std::vector<int>& out) const;
    std::string normalize(std::string_view text) const;

    TokenizerConfig config_;
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
    MergeList merges_;
    std::unordered_map<std::uint64_t, MergeRule, PairHash> rules_;
};

struct TokenizationMismatch {
    std::size_t line = 0;
    std::vector<std::string> first;
    std::vector<std::string> second;
};

struct TokenizationDiff {
    std::size_t lines = 0;
    std::size_t matching = 0;
    double match_rate = 1.0;
    std::vector<TokenizationMismatch> sample;
};

TokenizationDiff diff_tokenizations(std::span<const std::string> lines, const Tokenizer& first,
                                    const Tokenizer& second, std::size_t sample_limit = 10);

}  // namespace tinylm
