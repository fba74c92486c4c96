#include "tinylm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "tinylm/error.hpp"
#include "tinylm/kvfile.hpp"
#include "tinylm/rng.hpp"
#include "tinylm/utf8.hpp"

namespace tinylm {

std::size_t Corpus::line_count() const noexcept {
    std::size_t n = 0;
    for (const auto& s : sources) n += s.lines.size();
    return n;
}

std::vector<std::string> Corpus::all_lines() const {
    std::vector<std::string> out;
    out.reserve(line_count());
    for (const auto& s : sources) out.insert(out.end(), s.lines.begin(), s.lines.end());
    return out;
}

Corpus load_corpus(std::span<const std::filesystem::path> paths, std::span<const std::string> tags) {
    if (!tags.empty() && tags.size() != paths.size()) {
        fail(ErrorKind::usage, "got " + std::to_string(tags.size()) + " source tags for " + std::to_string(paths.size()) + " files");
    }
    Corpus corpus;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < paths.size(); ++i) {
        const std::string tag = tags.empty() ? paths[i].stem().string() : tags[i];
        if (!seen.insert(tag).second) fail(ErrorKind::data, "duplicate source tag '" + tag + "'");
        auto clean = utf8::sanitize(read_file(paths[i]));
        corpus.replacements += clean.replacements;
        SourceDocument doc{tag, {}};
        for (auto& line : split(clean.text, '\n')) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (trim(line).empty()) continue;
            doc.lines.push_back(std::move(line));
        }
        if (!doc.lines.empty()) corpus.sources.push_back(std::move(doc));
    }
    return corpus;
}

Corpus load_corpus(const std::filesystem::path& path) {
    std::error_code ec;
    if (std::filesystem::is_directory(path, ec)) {
        std::vector<std::filesystem::path> files;
        for (const auto& entry : std::filesystem::directory_iterator(path)) {
            if (entry.is_regular_file() && !entry.path().filename().string().starts_with(".")) files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end());
        if (files.empty()) fail(ErrorKind::io, "no corpus files in " + path.string());
        return load_corpus(files);
    }
    if (!std::filesystem::exists(path, ec)) fail(ErrorKind::io, "corpus path does not exist: " + path.string());
    const std::filesystem::path single[] = {path};
    return load_corpus(single);
}

bool is_question(std::string_view line) {
    static const std::vector<std::string_view> closers = {"\"", "'", "\xE2\x80\x9D", "\xE2\x80\x99", "\xC2\xBB"};
    while (!line.empty()) {
        const char c = line.back();
        if (c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\f' || c == '\v') {
            line.remove_suffix(1);
            continue;
        }
        bool stripped = false;
        for (auto q : closers) {
            if (line.ends_with(q)) {
                line.remove_suffix(q.size());
                stripped = true;
                break;
            }
        }
        if (!stripped) break;
    }
    return !line.empty() && line.back() == '?';
}

namespace {

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

}  // namespace

CorpusStats compute_stats(const Corpus& corpus, const Tokenizer& tokenizer) {
    const std::size_t total_lines = corpus.line_count();
    if (total_lines == 0) fail(ErrorKind::data, "cannot compute statistics of an empty corpus");
    CorpusStats stats;
    std::size_t all_tokens = 0, all_questions = 0;
    for (const auto& src : corpus.sources) {
        std::size_t tokens = 0, questions = 0;
        for (const auto& line : src.lines) {
            tokens += tokenizer.encode(line).size();
            if (is_question(line)) ++questions;
        }
        SourceStats row;
        row.tag = src.tag;
        row.sentences = src.lines.size();
        row.avg_length = double(tokens) / double(row.sentences);
        row.question_proportion = double(questions) / double(row.sentences);
        row.proportion = double(row.sentences) / double(total_lines);
        stats.rows.push_back(row);
        all_tokens += tokens;
        all_questions += questions;
    }
    stats.total.tag = "Total";
    stats.total.sentences = total_lines;
    stats.total.avg_length = double(all_tokens) / double(total_lines);
    stats.total.question_proportion = double(all_questions) / double(total_lines);
    stats.total.proportion = 1.0;
    return stats;
}

std::string CorpusStats::to_tsv() const {
    std::string out = "Dataset\t# Sentences\tAvg. length\tQuestions (Proportion)\tProportion\n";
    auto row = [&](const SourceStats& s) {
        out += s.tag + "\t" + std::to_string(s.sentences) + "\t" + fixed(s.avg_length, 2) + "\t" +
               fixed(s.question_proportion, 4) + "\t" + fixed(s.proportion, 4) + "\n";
    };
    for (const auto& r : rows) row(r);
    row(total);
    return out;
}

std::vector<Corpus> split_corpus(const Corpus& corpus, std::span<const double> fractions, std::uint64_t seed) {
    if (fractions.empty()) fail(ErrorKind::config, "split needs at least one fraction");
    double sum = 0.0;
    for (double f : fractions) {
        if (!(f > 0.0)) fail(ErrorKind::config, "split fractions must be positive");
        sum += f;
    }
    if (std::fabs(sum - 1.0) > 1e-9) fail(ErrorKind::config, "split fractions must sum to 1, got " + format_double(sum));

    struct Ref {
        std::size_t source, line;
    };
    std::vector<Ref> refs;
    for (std::size_t s = 0; s < corpus.sources.size(); ++s) {
        for (std::size_t l = 0; l < corpus.sources[s].lines.size(); ++l) refs.push_back({s, l});
    }
    Rng rng(seed);
    for (std::size_t i = refs.size(); i > 1; --i) {
        std::swap(refs[i - 1], refs[static_cast<std::size_t>(rng.uniform_int(0, std::int64_t(i) - 1))]);
    }

    std::vector<Corpus> parts(fractions.size());
    double cumulative = 0.0;
    std::size_t begin = 0;
    for (std::size_t p = 0; p < fractions.size(); ++p) {
        cumulative += fractions[p];
        const std::size_t end = p + 1 == fractions.size()
                                    ? refs.size()
                                    : std::min(refs.size(), static_cast<std::size_t>(std::llround(cumulative * double(refs.size()))));
        std::vector<Ref> chunk(refs.begin() + long(begin), refs.begin() + long(std::max(begin, end)));
        std::sort(chunk.begin(), chunk.end(), [](const Ref& a, const Ref& b) {
            return a.source != b.source ? a.source < b.source : a.line < b.line;
        });
        for (const auto& r : chunk) {
            const auto& tag = corpus.sources[r.source].tag;
            if (parts[p].sources.empty() || parts[p].sources.back().tag != tag) parts[p].sources.push_back({tag, {}});
            parts[p].sources.back().lines.push_back(corpus.sources[r.source].lines[r.line]);
        }
        begin = std::max(begin, end);
    }
    return parts;
}

}  // namespace tinylm
