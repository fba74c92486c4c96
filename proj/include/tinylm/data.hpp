#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tinylm/tokenizer.hpp"

namespace tinylm {

struct SourceDocument {
    std::string tag;
    std::vector<std::string> lines;
};

struct Corpus {
    std::vector<SourceDocument> sources;
    std::size_t replacements = 0;  // invalid UTF-8 sequences replaced on load

    std::size_t line_count() const noexcept;
    std::vector<std::string> all_lines() const;
};

// One sentence per non-blank line. Tags default to the file stem.
Corpus load_corpus(std::span<const std::filesystem::path> paths, std::span<const std::string> tags = {});
// A directory loads every regular, non-hidden file in name order; a file loads alone.
Corpus load_corpus(const std::filesystem::path& path);

// Trailing whitespace and closing quotes are ignored before looking for '?'.
bool is_question(std::string_view line);

struct SourceStats {
    std::string tag;
    std::size_t sentences = 0;
    double avg_length = 0.0;
    double question_proportion = 0.0;
    double proportion = 0.0;
};

struct CorpusStats {
    std::vector<SourceStats> rows;
    SourceStats total;

    std::string to_tsv() const;
};

CorpusStats compute_stats(const Corpus& corpus, const Tokenizer& tokenizer);

// Deterministic shuffle of all lines, partitioned by the given fractions.
// Inside each part, lines keep their source and original order.
std::vector<Corpus> split_corpus(const Corpus& corpus, std::span<const double> fractions, std::uint64_t seed);

}  // namespace tinylm
