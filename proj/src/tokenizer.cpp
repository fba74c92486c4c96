#include "tinylm/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <set>
#include <unordered_set>

#include "tinylm/error.hpp"
#include "tinylm/kvfile.hpp"
#include "tinylm/utf8.hpp"

namespace tinylm {

void TokenizerConfig::validate() const {
    if (special_tokens.size() != static_cast<std::size_t>(kNumSpecialTokens)) {
        fail(ErrorKind::config, "tokenizer needs exactly 5 special tokens (pad, unk, bos, eos, mask)");
    }
    std::set<std::string> seen;
    for (const auto& s : special_tokens) {
        if (s.empty() || s.find_first_of(" \t\r\n") != std::string::npos) {
            fail(ErrorKind::config, "special token '" + s + "' must be non-empty and free of whitespace");
        }
        if (!seen.insert(s).second) fail(ErrorKind::config, "duplicate special token '" + s + "'");
    }
    if (vocab_size < kMinVocabSize) {
        fail(ErrorKind::config, "vocab_size " + std::to_string(vocab_size) + " is below the byte alphabet plus specials (" +
                                    std::to_string(kMinVocabSize) + ")");
    }
}

// ---------------------------------------------------------------------------
// byte remapping

namespace bytemap {
namespace {

struct Tables {
    std::array<char32_t, 256> forward{};
    std::map<char32_t, unsigned char> backward;
    std::array<std::string, 256> encoded;
};

const Tables& tables() {
    static const Tables t = [] {
        Tables out;
        auto printable = [](int b) { return (b >= '!' && b <= '~') || (b >= 0xA1 && b <= 0xAC) || (b >= 0xAE && b <= 0xFF); };
        char32_t next = 256;
        for (int b = 0; b < 256; ++b) {
            out.forward[b] = printable(b) ? char32_t(b) : next++;
            out.backward[out.forward[b]] = static_cast<unsigned char>(b);
            utf8::append(out.encoded[b], out.forward[b]);
        }
        return out;
    }();
    return t;
}

}  // namespace

char32_t byte_to_codepoint(unsigned char byte) noexcept {
    return tables().forward[byte];
}

std::optional<unsigned char> codepoint_to_byte(char32_t cp) noexcept {
    const auto& back = tables().backward;
    auto it = back.find(cp);
    if (it == back.end()) return std::nullopt;
    return it->second;
}

std::string encode(std::string_view raw_bytes) {
    const auto& t = tables();
    std::string out;
    out.reserve(raw_bytes.size() * 2);
    for (char c : raw_bytes) out += t.encoded[static_cast<unsigned char>(c)];
    return out;
}

std::optional<std::string> decode(std::string_view token_string) {
    std::string out;
    out.reserve(token_string.size());
    std::size_t pos = 0;
    while (pos < token_string.size()) {
        std::size_t len = 0;
        auto cp = utf8::decode(token_string, pos, len);
        if (!cp) return std::nullopt;
        auto b = codepoint_to_byte(*cp);
        if (!b) return std::nullopt;
        out.push_back(static_cast<char>(*b));
        pos += len;
    }
    return out;
}

}  // namespace bytemap

// ---------------------------------------------------------------------------
// pre-tokenization

namespace {

bool is_space(char c) noexcept {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

}  // namespace

std::vector<std::string> pretokenize(std::string_view text) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const std::size_t ws_begin = pos;
        while (pos < text.size() && is_space(text[pos])) ++pos;
        const std::size_t word_begin = pos;
        while (pos < text.size() && !is_space(text[pos])) ++pos;
        std::string_view ws = text.substr(ws_begin, word_begin - ws_begin);
        std::string_view word = text.substr(word_begin, pos - word_begin);
        if (word.empty()) {
            if (!ws.empty()) out.emplace_back(ws);
            continue;
        }
        if (!ws.empty() && ws.back() == ' ') {
            if (ws.size() > 1) out.emplace_back(ws.substr(0, ws.size() - 1));
            out.emplace_back(std::string(" ") + std::string(word));
        } else {
            if (!ws.empty()) out.emplace_back(ws);
            out.emplace_back(word);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// vocabulary

int Tokenizer::add_token(const std::string& token_string) {
    if (auto it = ids_.find(token_string); it != ids_.end()) return it->second;
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token_string);
    ids_.emplace(token_string, id);
    return id;
}

void Tokenizer::add_merge(const Merge& merge) {
    auto l = ids_.find(merge.left);
    auto r = ids_.find(merge.right);
    if (l == ids_.end() || r == ids_.end() || is_special(l->second) || is_special(r->second)) {
        fail(ErrorKind::data, "merge '" + merge.left + " " + merge.right + "' (rank " + std::to_string(merges_.size()) +
                                  ") references a token not available at that rank");
    }
    const std::string product = merge.left + merge.right;
    if (auto p = ids_.find(product); p != ids_.end() && is_special(p->second)) {
        fail(ErrorKind::data, "merge product '" + product + "' collides with a special token");
    }
    const auto key = pair_key(l->second, r->second);
    if (rules_.count(key)) fail(ErrorKind::data, "duplicate merge '" + merge.left + " " + merge.right + "'");
    const int product_id = add_token(product);
    rules_.emplace(key, MergeRule{merges_.size(), product_id});
    merges_.push_back(merge);
}

Tokenizer Tokenizer::from_merges(const TokenizerConfig& config, const MergeList& merges) {
    config.validate();
    Tokenizer tok;
    tok.config_ = config;
    for (const auto& s : config.special_tokens) tok.add_token(s);
    for (int b = 0; b < 256; ++b) {
        const char byte = static_cast<char>(b);
        if (tok.add_token(bytemap::encode(std::string_view(&byte, 1))) != kFirstByteId + b) {
            fail(ErrorKind::config, "special token collides with a byte token");
        }
    }
    for (const auto& m : merges) tok.add_merge(m);
    return tok;
}

const std::string& Tokenizer::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        fail(ErrorKind::data, "token id " + std::to_string(id) + " outside vocabulary of size " +
                                  std::to_string(tokens_.size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
}

std::optional<int> Tokenizer::find(std::string_view token_string) const {
    auto it = ids_.find(std::string(token_string));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
}

// ---------------------------------------------------------------------------
// training

namespace {

struct Word {
    std::vector<int> symbols;
    std::uint64_t freq;
};

// Merges every non-overlapping (left, right) occurrence, scanning left to right.
bool merge_in_place(std::vector<int>& symbols, int left, int right, int product) {
    bool changed = false;
    std::size_t w = 0;
    for (std::size_t i = 0; i < symbols.size(); ++i) {
        if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
            symbols[w++] = product;
            ++i;
            changed = true;
        } else {
            symbols[w++] = symbols[i];
        }
    }
    symbols.resize(w);
    return changed;
}

}  // namespace

Tokenizer Tokenizer::train(std::span<const std::string> lines, const TokenizerConfig& config) {
    Tokenizer tok = from_merges(config, {});

    std::map<std::string, std::uint64_t> counts;
    for (const auto& line : lines) {
        for (auto& piece : pretokenize(tok.normalize(line))) ++counts[piece];
    }
    if (counts.empty()) fail(ErrorKind::data, "tokenizer training corpus is empty");

    std::vector<Word> words;
    words.reserve(counts.size());
    for (const auto& [piece, freq] : counts) {
        Word w{{}, freq};
        w.symbols.reserve(piece.size());
        for (char c : piece) w.symbols.push_back(kFirstByteId + static_cast<unsigned char>(c));
        words.push_back(std::move(w));
    }

    using Pair = std::uint64_t;
    std::unordered_map<Pair, std::uint64_t> pair_count;
    std::unordered_map<Pair, std::vector<std::size_t>> where;
    std::unordered_set<Pair> forbidden;

    const auto& strings = tok.tokens_;
    auto left_of = [](Pair p) { return static_cast<int>(p >> 32); };
    auto right_of = [](Pair p) { return static_cast<int>(p & 0xFFFFFFFFu); };
    // Highest count first, then (left, right) in byte order.
    auto before = [&](const std::pair<std::uint64_t, Pair>& a, const std::pair<std::uint64_t, Pair>& b) {
        if (a.first != b.first) return a.first > b.first;
        const auto& al = strings[left_of(a.second)];
        const auto& bl = strings[left_of(b.second)];
        if (al != bl) return al < bl;
        return strings[right_of(a.second)] < strings[right_of(b.second)];
    };
    std::set<std::pair<std::uint64_t, Pair>, decltype(before)> queue(before);

    auto adjust = [&](Pair p, std::int64_t delta) {
        if (forbidden.count(p)) return;
        auto& c = pair_count[p];
        if (c > 0) queue.erase({c, p});
        c = static_cast<std::uint64_t>(static_cast<std::int64_t>(c) + delta);
        if (c > 0) queue.insert({c, p});
    };

    for (std::size_t wi = 0; wi < words.size(); ++wi) {
        const auto& s = words[wi].symbols;
        for (std::size_t i = 0; i + 1 < s.size(); ++i) {
            const Pair p = pair_key(s[i], s[i + 1]);
            adjust(p, static_cast<std::int64_t>(words[wi].freq));
            auto& list = where[p];
            if (list.empty() || list.back() != wi) list.push_back(wi);
        }
    }

    while (tok.tokens_.size() < config.vocab_size && !queue.empty()) {
        const auto [count, best] = *queue.begin();
        if (count < 2) break;
        const int left = left_of(best);
        const int right = right_of(best);
        const std::string product = strings[left] + strings[right];
        if (auto p = tok.ids_.find(product); p != tok.ids_.end() && tok.is_special(p->second)) {
            queue.erase(queue.begin());
            forbidden.insert(best);
            continue;
        }
        tok.add_merge(Merge{strings[left], strings[right]});
        const int product_id = tok.ids_.at(product);

        const std::vector<std::size_t> affected = std::move(where[best]);
        where.erase(best);
        for (std::size_t wi : affected) {
            auto& word = words[wi];
            auto& s = word.symbols;
            const auto freq = static_cast<std::int64_t>(word.freq);
            std::vector<int> before_merge = s;
            if (!merge_in_place(s, left, right, product_id)) continue;
            for (std::size_t i = 0; i + 1 < before_merge.size(); ++i) {
                adjust(pair_key(before_merge[i], before_merge[i + 1]), -freq);
            }
            for (std::size_t i = 0; i + 1 < s.size(); ++i) {
                const Pair p = pair_key(s[i], s[i + 1]);
                adjust(p, freq);
                if (p == best) continue;
                auto& list = where[p];
                if (list.empty() || list.back() != wi) list.push_back(wi);
            }
        }
    }
    return tok;
}

// ---------------------------------------------------------------------------
// encode / decode

std::string Tokenizer::normalize(std::string_view text) const {
    return config_.lowercase ? utf8::lowercase(text) : std::string(text);
}

void Tokenizer::encode_word(std::string_view word, std::vector<int>& out) const {
    std::vector<int> symbols;
    symbols.reserve(word.size());
    for (char c : word) symbols.push_back(kFirstByteId + static_cast<unsigned char>(c));
    while (symbols.size() > 1) {
        std::size_t best_rank = SIZE_MAX;
        const MergeRule* best = nullptr;
        int best_left = 0, best_right = 0;
        for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
            auto it = rules_.find(pair_key(symbols[i], symbols[i + 1]));
            if (it != rules_.end() && it->second.rank < best_rank) {
                best_rank = it->second.rank;
                best = &it->second;
                best_left = symbols[i];
                best_right = symbols[i + 1];
            }
        }
        if (!best) break;
        merge_in_place(symbols, best_left, best_right, best->product);
    }
    out.insert(out.end(), symbols.begin(), symbols.end());
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
    std::vector<int> ids;
    if (tokens_.empty()) fail(ErrorKind::config, "tokenizer is not initialised");
    for (const auto& piece : pretokenize(normalize(text))) encode_word(piece, ids);
    return ids;
}

std::vector<std::string> Tokenizer::segment(std::string_view text) const {
    std::vector<std::string> out;
    for (int id : encode(text)) out.push_back(tokens_[static_cast<std::size_t>(id)]);
    return out;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
    std::string joined;
    for (int id : ids) {
        const auto& t = token(id);
        if (!is_special(id)) joined += t;
    }
    auto raw = bytemap::decode(joined);
    if (!raw) fail(ErrorKind::data, "vocabulary contains a token outside the byte alphabet");
    return *raw;
}

// ---------------------------------------------------------------------------
// files

void Tokenizer::save(const std::filesystem::path& dir) const {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    std::string specials;
    for (std::size_t i = 0; i < config_.special_tokens.size(); ++i) {
        if (i) specials += ' ';
        specials += config_.special_tokens[i];
    }
    write_file(dir / kConfigFile, format_key_values({{"vocab_size", std::to_string(config_.vocab_size)},
                                                     {"lowercase", config_.lowercase ? "true" : "false"},
                                                     {"special_tokens", specials}}));
    std::string vocab;
    for (std::size_t i = 0; i < tokens_.size(); ++i) vocab += std::to_string(i) + "\t" + tokens_[i] + "\n";
    write_file(dir / kVocabFile, vocab);
    std::string merges;
    for (const auto& m : merges_) merges += m.left + " " + m.right + "\n";
    write_file(dir / kMergesFile, merges);
}

Tokenizer Tokenizer::load(const std::filesystem::path& dir) {
    auto kv = KeyValueFile::load(dir / kConfigFile);
    TokenizerConfig config;
    config.vocab_size = static_cast<std::size_t>(kv.take_int("vocab_size", 0));
    config.lowercase = kv.take_bool("lowercase", false);
    if (auto s = kv.take("special_tokens")) {
        config.special_tokens.clear();
        for (auto& t : split(*s, ' ')) {
            if (!t.empty()) config.special_tokens.push_back(t);
        }
    }
    kv.finish();

    MergeList merges;
    const std::string merges_text = read_file(dir / kMergesFile);
    std::size_t line_no = 0;
    for (const auto& line : split(merges_text, '\n')) {
        ++line_no;
        if (line.empty()) continue;
        const auto space = line.find(' ');
        if (space == std::string::npos || space == 0 || space + 1 >= line.size() ||
            line.find(' ', space + 1) != std::string::npos) {
            fail(ErrorKind::data, (dir / kMergesFile).string() + ":" + std::to_string(line_no) + ": malformed merge");
        }
        merges.push_back(Merge{line.substr(0, space), line.substr(space + 1)});
    }
    Tokenizer tok = from_merges(config, merges);

    const std::string vocab_text = read_file(dir / kVocabFile);
    std::size_t expected = 0;
    for (const auto& line : split(vocab_text, '\n')) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos || line.substr(0, tab) != std::to_string(expected) || expected >= tok.tokens_.size() ||
            line.substr(tab + 1) != tok.tokens_[expected]) {
            fail(ErrorKind::data, (dir / kVocabFile).string() + ": entry " + std::to_string(expected) +
                                      " disagrees with the merge list");
        }
        ++expected;
    }
    if (expected != tok.tokens_.size()) {
        fail(ErrorKind::data, (dir / kVocabFile).string() + ": has " + std::to_string(expected) + " entries, merges imply " +
                                  std::to_string(tok.tokens_.size()));
    }
    return tok;
}

// ---------------------------------------------------------------------------

TokenizationDiff diff_tokenizations(std::span<const std::string> lines, const Tokenizer& first,
                                    const Tokenizer& second, std::size_t sample_limit) {
    TokenizationDiff diff;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        auto a = first.segment(lines[i]);
        auto b = second.segment(lines[i]);
        ++diff.lines;
        if (a == b) {
            ++diff.matching;
        } else if (diff.sample.size() < sample_limit) {
            diff.sample.push_back({i, std::move(a), std::move(b)});
        }
    }
    diff.match_rate = diff.lines ? double(diff.matching) / double(diff.lines) : 1.0;
    return diff;
}

}  // namespace tinylm
