#include <doctest.h>

#include "support/files.hpp"
#include "tinylm/data.hpp"
#include "tinylm/error.hpp"
#include "tinylm/kvfile.hpp"

using namespace tinylm;
using tinylm::testing::TempDir;

namespace {

Tokenizer byte_tokenizer() {
    TokenizerConfig c;
    c.vocab_size = kMinVocabSize;
    return Tokenizer::from_merges(c, {});
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("loading drops blank lines and repairs bad bytes") {
    TempDir dir("data");
    write_file(dir / "three.txt", "first line\n   \nsecond line\n");
    write_file(dir / "bad.txt", "ok \xFF\xFE here\r\nfine\n");
    const std::filesystem::path p1[] = {dir / "three.txt"};
    auto c = load_corpus(p1);
    REQUIRE(c.sources.size() == 1);
    CHECK(c.sources[0].tag == "three");
    CHECK(c.sources[0].lines == std::vector<std::string>{"first line", "second line"});
    CHECK(c.replacements == 0);

    const std::filesystem::path p2[] = {dir / "bad.txt"};
    auto b = load_corpus(p2);
    CHECK(b.replacements == 1);
    CHECK(b.sources[0].lines[0] == "ok \xEF\xBF\xBD here");
    CHECK(b.sources[0].lines[1] == "fine");

    const std::filesystem::path missing[] = {dir / "nope.txt"};
    try {
        load_corpus(missing);
        FAIL("expected error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::io);
    }
    const std::filesystem::path twice[] = {dir / "three.txt", dir / "three.txt"};
    CHECK_THROWS_AS(load_corpus(twice), Error);
}

TEST_CASE("fixture directory counts") {
    auto c = load_corpus("tests/data/stats_fixture");
    REQUIRE(c.sources.size() == 2);
    CHECK(c.sources[0].tag == "a_child");
    CHECK(c.sources[1].tag == "b_wiki");
    CHECK(c.sources[0].lines.size() == 6);
    CHECK(c.sources[1].lines.size() == 4);
    CHECK(c.line_count() == 10);
}

TEST_CASE("question detection") {
    CHECK(is_question("Hi?"));
    CHECK_FALSE(is_question("Hello."));
    CHECK(is_question("Really?  "));
    CHECK(is_question("\"Where?\""));
    CHECK(is_question("He said \xE2\x80\x9CWhy?\xE2\x80\x9D"));
    CHECK_FALSE(is_question("?!"));
    CHECK_FALSE(is_question(""));
    CHECK_FALSE(is_question("\"\""));
}

TEST_CASE("stats on simple inputs") {
    Corpus c;
    c.sources.push_back({"only", {"Hi?", "Hello."}});
    auto s = compute_stats(c, byte_tokenizer());
    REQUIRE(s.rows.size() == 1);
    CHECK(s.rows[0].question_proportion == 0.5);
    CHECK(s.rows[0].proportion == 1.0);
    CHECK(s.rows[0].avg_length == 4.5);
    CHECK_THROWS_AS(compute_stats(Corpus{}, byte_tokenizer()), Error);
}

TEST_CASE("stats on the 10-line fixture match the hand table") {
    // Byte-level tokenizer without merges: token count = UTF-8 byte count.
    // a_child: 3+13+11+8+4+2 = 41 bytes over 6 lines, 3 questions.
    // b_wiki: 18+13+18+10 = 59 bytes over 4 lines, 1 question.
    auto c = load_corpus("tests/data/stats_fixture");
    auto tok = byte_tokenizer();
    auto s = compute_stats(c, tok);
    REQUIRE(s.rows.size() == 2);
    CHECK(s.rows[0].sentences == 6);
    CHECK(s.rows[0].avg_length == doctest::Approx(41.0 / 6.0));
    CHECK(s.rows[0].question_proportion == doctest::Approx(0.5));
    CHECK(s.rows[0].proportion == doctest::Approx(0.6));
    CHECK(s.rows[1].avg_length == doctest::Approx(14.75));
    CHECK(s.rows[1].question_proportion == doctest::Approx(0.25));
    CHECK(s.rows[1].proportion == doctest::Approx(0.4));
    CHECK(s.total.sentences == 10);
    CHECK(s.total.avg_length == doctest::Approx(10.0));
    CHECK(s.total.question_proportion == doctest::Approx(0.4));
    CHECK(s.rows[0].proportion + s.rows[1].proportion == doctest::Approx(1.0).epsilon(1e-9));

    // Totals are the line-weighted aggregate of the rows.
    double len = 0, q = 0;
    for (const auto& r : s.rows) len += r.avg_length * double(r.sentences), q += r.question_proportion * double(r.sentences);
    CHECK(s.total.avg_length == doctest::Approx(len / 10.0));
    CHECK(s.total.question_proportion == doctest::Approx(q / 10.0));

    CHECK(s.to_tsv() ==
          "Dataset\t# Sentences\tAvg. length\tQuestions (Proportion)\tProportion\n"
          "a_child\t6\t6.83\t0.5000\t0.6000\n"
          "b_wiki\t4\t14.75\t0.2500\t0.4000\n"
          "Total\t10\t10.00\t0.4000\t1.0000\n");
    CHECK(compute_stats(c, tok).to_tsv() == s.to_tsv());
}

TEST_CASE("splits") {
    auto c = load_corpus("tests/data/stats_fixture");
    const double whole[] = {1.0};
    auto one = split_corpus(c, whole, 3);
    REQUIRE(one.size() == 1);
    CHECK(one[0].all_lines() == c.all_lines());

    const double three[] = {0.6, 0.2, 0.2};
    auto a = split_corpus(c, three, 42);
    auto b = split_corpus(c, three, 42);
    REQUIRE(a.size() == 3);
    std::multiset<std::string> seen;
    std::size_t total = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(a[i].all_lines() == b[i].all_lines());
        for (const auto& l : a[i].all_lines()) seen.insert(l);
        total += a[i].line_count();
    }
    CHECK(total == 10);
    CHECK(a[0].line_count() == 6);
    auto all = c.all_lines();
    CHECK(seen == std::multiset<std::string>(all.begin(), all.end()));

    const double bad[] = {0.5, 0.4};
    CHECK_THROWS_AS(split_corpus(c, bad, 1), Error);
    const double negative[] = {1.5, -0.5};
    CHECK_THROWS_AS(split_corpus(c, negative, 1), Error);
}

}  // TEST_SUITE
