#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace tinylm::utf8 {

inline constexpr char32_t kReplacement = 0xFFFD;

void append(std::string& out, char32_t cp);

// Decodes one well-formed code point starting at `pos`; std::nullopt on any
// malformed, overlong or surrogate sequence. `length` receives the bytes used.
std::optional<char32_t> decode(std::string_view text, std::size_t pos, std::size_t& length);

struct Sanitized {
    std::string text;
    std::size_t replacements = 0;
};

// Replaces each maximal invalid subsequence with U+FFFD.
Sanitized sanitize(std::string_view text);

// Simple (1:1) lowercase folding for ASCII, Latin-1, Latin Extended-A, Greek
// and Cyrillic; everything else, including invalid bytes, passes through.
std::string lowercase(std::string_view text);
char32_t fold_case(char32_t cp) noexcept;

}  // namespace tinylm::utf8
