#include <doctest.h>

#include <sstream>

#include <json.hpp>

#include "cli.hpp"
#include "support/files.hpp"
#include "tinylm/kvfile.hpp"
#include "tinylm/search.hpp"

using tinylm::read_file;
using tinylm::write_file;
using tinylm::testing::TempDir;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = tinylm::cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

int line_count(const std::string& s) {
    int n = 0;
    for (char c : s) n += c == '\n';
    return n;
}

const std::string kFixture = "tests/data/stats_fixture";

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("tokenizer train then stats reproduces the golden table") {
    TempDir dir("cli");
    const auto tok = (dir / "tok").string();
    auto r = run({"tokenizer", "train", "--corpus", kFixture, "--vocab-size", "300", "--lowercase", "--out", tok});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    auto s = run({"stats", "--corpus", kFixture, "--tokenizer", tok});
    REQUIRE_MESSAGE(s.code == 0, s.err);
    CHECK(s.out == read_file("tests/data/golden/stats_fixture.tsv"));

    const auto tok2 = (dir / "tok2").string();
    REQUIRE(run({"tokenizer", "train", "--corpus", kFixture, "--vocab-size", "300", "--lowercase", "--out", tok2}).code == 0);
    CHECK(read_file(dir / "tok/merges.txt") == read_file(dir / "tok2/merges.txt"));
    CHECK(read_file(dir / "tok/vocab.txt") == read_file(dir / "tok2/vocab.txt"));
}

TEST_CASE("an undersized vocabulary is a configuration error") {
    TempDir dir("cli");
    auto r = run({"tokenizer", "train", "--corpus", kFixture, "--vocab-size", "10", "--out", (dir / "t").string()});
    CHECK(r.code != 0);
    CHECK(starts_with(r.err, "tinylm-error: config: "));
    CHECK(line_count(r.err) == 1);
    CHECK_FALSE(std::filesystem::exists(dir / "t/vocab.txt"));
}

TEST_CASE("params reports the preset sizes") {
    auto r = run({"params", "--preset", "bebeshka"});
    REQUIRE(r.code == 0);
    REQUIRE(starts_with(r.out, "parameters\t"));
    const double count = std::stod(r.out.substr(11));
    CHECK(count > 14.4e6);
    CHECK(count < 17.6e6);
    CHECK(r.out.find("embeddings.token\t[8000,560]") != std::string::npos);

    auto z = run({"params", "--config", "configs/zlata.cfg"});
    REQUIRE(z.code == 0);
    const double zc = std::stod(z.out.substr(11));
    CHECK(zc > 59.4e6);
    CHECK(zc < 72.6e6);
    CHECK(run({"params", "--config", "configs/bebeshka.cfg"}).out == r.out);
}

TEST_CASE("manifests record the command, seed and input digests") {
    TempDir dir("cli");
    auto r = run({"tokenizer", "train", "--corpus", kFixture, "--vocab-size", "270", "--seed", "5", "--out",
                  (dir / "tok").string()});
    REQUIRE(r.code == 0);
    const auto j = nlohmann::json::parse(read_file(dir / "tok/run_manifest.json"));
    CHECK(j["command"] == "tokenizer train");
    CHECK(j["seed"] == 5);
    CHECK(j["config"]["--vocab-size"] == "270");
    CHECK(j["inputs"][kFixture].get<std::string>().size() == 64);
    CHECK_FALSE(j["version"].get<std::string>().empty());

    // No output directory: the manifest goes to stderr on one line.
    auto p = run({"params", "--preset", "zlata"});
    REQUIRE(p.code == 0);
    REQUIRE(starts_with(p.err, "tinylm-manifest: "));
    CHECK(nlohmann::json::parse(p.err.substr(17))["command"] == "params");

    const auto explicit_path = dir / "m.json";
    REQUIRE(run({"params", "--preset", "zlata", "--manifest", explicit_path.string()}).code == 0);
    CHECK(nlohmann::json::parse(read_file(explicit_path))["config"]["--preset"] == "zlata");
}

TEST_CASE("errors print one prefixed line") {
    auto missing = run({"stats", "--corpus", "no/such/dir", "--tokenizer", "no/such/tok"});
    CHECK(missing.code == 1);
    CHECK(starts_with(missing.err, "tinylm-error: io: "));
    CHECK(line_count(missing.err) == 1);

    auto unknown = run({"params", "--preset", "bebeshka", "--frobnicate"});
    CHECK(unknown.code == 2);
    CHECK(starts_with(unknown.err, "tinylm-error: usage: "));

    auto none = run({});
    CHECK(none.code == 2);
    CHECK(starts_with(none.err, "tinylm-error: usage: "));

    auto preset = run({"params", "--preset", "nope"});
    CHECK(preset.code == 1);
    CHECK(starts_with(preset.err, "tinylm-error: usage: "));

    CHECK(run({"--help"}).code == 0);
    CHECK(run({"--version"}).code == 0);
}

TEST_CASE("bundled config files parse") {
    CHECK(tinylm::SearchSpace::load("configs/architecture_space.txt").to_text() ==
          tinylm::SearchSpace::architecture().to_text());
    CHECK(run({"params", "--config", "configs/tiny_mlm.cfg"}).code == 0);
}

TEST_CASE("bad config keys are rejected") {
    TempDir dir("cli");
    write_file(dir / "bad.cfg", "num_layers = 2\nnum_hedas = 4\n");
    auto r = run({"params", "--config", (dir / "bad.cfg").string()});
    CHECK(r.code == 1);
    CHECK(starts_with(r.err, "tinylm-error: config: "));
}

TEST_CASE("search with a synthetic objective writes a log and a summary") {
    TempDir dir("cli");
    write_file(dir / "space.txt", "num_layers = [1-8]\nnum_heads = [1-16]\n");
    const auto out = (dir / "study").string();
    auto r = run({"search", "--space", (dir / "space.txt").string(), "--objective", "quadratic", "--trials", "12",
                  "--seed", "3", "--out", out});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto study = tinylm::load_study(dir / "study/study.jsonl");
    CHECK(study.trials.size() == 12);
    CHECK(study.seed == 3);
    CHECK(starts_with(read_file(dir / "study/summary.tsv"), "Parameter\tSearch range\t"));
    CHECK(std::filesystem::exists(dir / "study/run_manifest.json"));

    auto again = run({"search", "--space", (dir / "space.txt").string(), "--objective", "unknown", "--trials", "1",
                      "--out", (dir / "x").string()});
    CHECK(again.code == 1);
    CHECK(starts_with(again.err, "tinylm-error: usage: "));
}

TEST_CASE("pretrain, score, eval pairs and finetune run end to end") {
    TempDir dir("cli");
    write_file(dir / "train.txt",
               "the cat sleeps .\nthe cats sleep .\nthe dog runs .\nthe dogs run .\na bird sings .\n"
               "the birds sing .\nthe cat runs .\nthe dogs sleep .\n");
    write_file(dir / "model.cfg",
               "objective = clm\nvocab_size = 300\nmax_seq_len = 16\nnum_layers = 1\nnum_heads = 2\n"
               "head_size = 8\nffn_size = 32\npos_type = absolute\nepochs = 2\nbatch_size = 4\ngrad_accum = 1\n"
               "learning_rate = 0.001\n");
    const auto out = (dir / "run").string();
    auto p = run({"pretrain", "--config", (dir / "model.cfg").string(), "--corpus", (dir / "train.txt").string(),
                  "--val", (dir / "train.txt").string(), "--out", out, "--seed", "4"});
    REQUIRE_MESSAGE(p.code == 0, p.err);
    CHECK(line_count(p.out) == 3);
    CHECK(std::filesystem::exists(dir / "run/metrics.jsonl"));
    CHECK(std::filesystem::exists(dir / "run/model/weights.bin"));
    CHECK(nlohmann::json::parse(read_file(dir / "run/run_manifest.json"))["seed"] == 4);

    const auto model = (dir / "run/model").string();
    auto s1 = run({"score", "--model", model, "--text", "the cat sleeps ."});
    auto s2 = run({"score", "--model", model, "--text", "the cat sleeps ."});
    REQUIRE_MESSAGE(s1.code == 0, s1.err);
    CHECK(s1.out == s2.out);
    CHECK(std::stod(s1.out) < 0.0);

    write_file(dir / "pairs.jsonl",
               "{\"sentence_good\": \"the cat sleeps .\", \"sentence_bad\": \"the cat sleep .\", "
               "\"linguistics_term\": \"agreement\", \"UID\": \"sv\"}\n");
    auto e = run({"eval", "pairs", "--model", model, "--pairs", (dir / "pairs.jsonl").string(), "--name", "tiny"});
    REQUIRE_MESSAGE(e.code == 0, e.err);
    CHECK(starts_with(e.out, "Model\tagreement\tOverall\ntiny\t"));

    std::string task;
    for (int i = 0; i < 10; ++i) task += std::string(i % 2 ? "the cat sleeps .\t1\n" : "the dog runs .\t0\n");
    write_file(dir / "task.tsv", task);
    auto f = run({"finetune", "--model", model, "--task", (dir / "task.tsv").string(), "--preset", "decoder",
                  "--epochs", "1", "--batch-size", "4"});
    REQUIRE_MESSAGE(f.code == 0, f.err);
    CHECK(starts_with(f.out, "Task\tMCC\tAcc.\tF1\ntask\t"));
    auto f2 = run({"finetune", "--model", model, "--task", (dir / "task.tsv").string(), "--preset", "decoder",
                   "--epochs", "1", "--batch-size", "4"});
    CHECK(f.out == f2.out);
}

}  // TEST_SUITE
