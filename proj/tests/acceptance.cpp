// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any failed. `acceptance 4 9` runs a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "support/agreement.hpp"
#include "support/files.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "tinylm/data.hpp"
#include "tinylm/eval.hpp"
#include "tinylm/kvfile.hpp"
#include "tinylm/model.hpp"
#include "tinylm/search.hpp"
#include "tinylm/tokenizer.hpp"
#include "tinylm/training.hpp"
#include "tinylm/utf8.hpp"

using namespace tinylm;
using tinylm::testing::TempDir;

namespace {

struct Outcome {
    bool passed = false;
    std::string detail;
};

struct Criterion {
    int id;
    std::string name;
    double budget_seconds;
    std::function<Outcome()> check;
};

std::string fmt(const char* pattern, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, pattern, args...);
    return buf;
}

double median(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

std::string cli_run(const std::vector<std::string>& args, int& code) {
    std::ostringstream out, err;
    code = cli::run(args, out, err);
    return out.str();
}

// ---------------------------------------------------------------------------

Outcome parameter_counts() {
    int code_b = 0, code_z = 0;
    const auto b = cli_run({"params", "--config", "configs/bebeshka.cfg"}, code_b);
    const auto z = cli_run({"params", "--config", "configs/zlata.cfg"}, code_z);
    if (code_b != 0 || code_z != 0) return {false, "params command failed"};
    const double nb = std::stod(b.substr(b.find('\t') + 1));
    const double nz = std::stod(z.substr(z.find('\t') + 1));
    const bool ok = std::fabs(nb - 16e6) <= 1.6e6 && std::fabs(nz - 66e6) <= 6.6e6;
    return {ok, fmt("encoder preset %.0f (target 16M +-10%%), decoder preset %.0f (target 66M +-10%%)", nb, nz)};
}

Outcome gradient_suite() {
    Rng rng(424242);
    std::size_t checks = 0, failures = 0;
    double worst = 0.0;
    std::string first_failure;
    const auto cases = tinylm::testing::gradient_cases();
    for (const auto& c : cases) {
        for (int point = 0; point < 50; ++point) {
            const auto r = tinylm::testing::gradcheck(c.fn, c.make_inputs(rng), rng, 1e-3, 1e-3, 1e-6);
            ++checks;
            worst = std::max(worst, r.rel_error);
            if (!r.passed) {
                ++failures;
                if (first_failure.empty()) first_failure = c.name;
            }
        }
    }
    return {failures == 0, fmt("%zu ops x 50 points, %zu failures%s%s, worst rel err %.2e", cases.size(), failures,
                               first_failure.empty() ? "" : " first: ", first_failure.c_str(), worst)};
}

Outcome tokenizer_properties() {
    const auto corpus = load_corpus(std::filesystem::path("data/corpus/train"));
    const auto lines = corpus.all_lines();
    TokenizerConfig config;
    config.vocab_size = 1500;
    const auto a = Tokenizer::train(lines, config);
    const auto b = Tokenizer::train(lines, config);
    const bool deterministic = a.merges() == b.merges();
    bool sized = a.vocab_size() == config.vocab_size;
    std::string sizes;
    for (std::size_t v : {300, 500, 1000}) {
        TokenizerConfig small = config;
        small.vocab_size = v;
        const auto t = Tokenizer::train(lines, small);
        sized = sized && t.vocab_size() == v;
        sizes += fmt("%zu/%zu ", t.vocab_size(), v);
    }

    Rng rng(31337);
    const std::vector<std::pair<char32_t, char32_t>> ranges = {
        {0x20, 0x7E}, {0xA0, 0x24F}, {0x370, 0x4FF}, {0x3040, 0x30FF}, {0x4E00, 0x4FFF}, {0x1F300, 0x1F64F}};
    std::size_t round_trips = 0;
    for (int i = 0; i < 1000; ++i) {
        std::string s;
        const auto len = rng.uniform_int(0, 60);
        for (std::int64_t k = 0; k < len; ++k) {
            const auto& r = ranges[std::size_t(rng.uniform_int(0, std::int64_t(ranges.size()) - 1))];
            utf8::append(s, char32_t(rng.uniform_int(std::int64_t(r.first), std::int64_t(r.second))));
        }
        round_trips += a.decode(a.encode(s)) == s;
    }
    return {deterministic && sized && round_trips == 1000,
            fmt("round trip %zu/1000, identical merges across runs: %s, trained/configured vocab %s%zu/%zu",
                round_trips, deterministic ? "yes" : "no", sizes.c_str(), a.vocab_size(), config.vocab_size)};
}

Outcome masking_statistics() {
    std::vector<int> ids(1000000);
    Rng fill(5);
    for (auto& id : ids) id = int(fill.uniform_int(kNumSpecialTokens, 7999));
    Rng rng(17);
    const auto m = apply_mlm_masking(ids, MaskingPolicy{}, 8000, rng);
    std::size_t selected = 0, masked = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (m.labels[i] == kIgnoreIndex) continue;
        ++selected;
        masked += m.inputs[i] == kMaskId;
    }
    const double sel = double(selected) / double(ids.size());
    const double frac = double(masked) / double(selected);
    return {std::fabs(sel - 0.135) <= 0.002 && std::fabs(frac - 8.0 / 9.0) <= 0.004,
            fmt("selection rate %.5f (0.135 +- 0.002), mask fraction %.5f (0.88889 +- 0.004)", sel, frac)};
}

Outcome learnability() {
    auto kv = KeyValueFile::load("configs/tiny_mlm.cfg");
    ModelConfig mc;
    TrainConfig tc;
    mc.read(kv);
    tc.read(kv);
    kv.finish();

    const auto train_corpus = load_corpus(std::filesystem::path("data/corpus/train"));
    const auto val_corpus = load_corpus(std::filesystem::path("data/corpus/val"));
    TokenizerConfig tokc;
    tokc.vocab_size = mc.vocab_size;
    const auto train_lines = train_corpus.all_lines();
    const auto val_lines = val_corpus.all_lines();
    const auto tok = Tokenizer::train(train_lines, tokc);
    const auto train_docs = tokenize_documents(tok, train_lines);
    const auto val_docs = tokenize_documents(tok, val_lines);
    const auto train_data = pack_corpus(train_docs, mc.max_seq_len);
    const auto val_data = pack_corpus(val_docs, mc.max_seq_len);

    // Add-one unigram model from the training windows, scored on the
    // non-special validation tokens.
    std::vector<double> counts(mc.vocab_size, 1.0);
    double total = double(mc.vocab_size);
    for (int id : train_data.ids) {
        if (id < kNumSpecialTokens) continue;
        counts[std::size_t(id)] += 1.0;
        total += 1.0;
    }
    double nll = 0.0;
    std::size_t n = 0;
    for (int id : val_data.ids) {
        if (id < kNumSpecialTokens) continue;
        nll -= std::log(counts[std::size_t(id)] / total);
        ++n;
    }
    const double unigram_ppl = std::exp(nll / double(n));

    auto model = TransformerModel::init(mc, tc.seed);
    const auto log = train(model, train_data, val_data, tc, MaskingPolicy{});
    const auto& r = log.records();
    if (r.size() < 3) return {false, "training stopped before epoch 3"};
    const double final_ppl = r.back().perplexity;
    const bool ok = final_ppl < unigram_ppl && r[2].val_loss < r[0].val_loss;
    return {ok, fmt("%zu train windows; val perplexity %.2f vs unigram %.2f; val loss epoch1 %.4f, epoch3 %.4f, "
                    "epoch%zu %.4f",
                    train_data.size(), final_ppl, unigram_ppl, r[0].val_loss, r[2].val_loss, r.size(),
                    r.back().val_loss)};
}

double best_value(const SearchSpace& space, const std::function<double(const Params&)>& f, SamplerKind sampler,
                  std::uint64_t seed) {
    StudyOptions opt;
    opt.n_trials = 50;
    opt.seed = seed;
    opt.sampler = sampler;
    opt.prune = false;
    const auto study = run_study(space, [&](TrialContext& t) { return f(t.params()); }, opt);
    return *study.best()->value;
}

Outcome tpe_vs_random() {
    const auto space = SearchSpace::architecture();
    const auto layers_heads = [](const Params& p) {
        const double l = double(param_int(p, "num_layers")) - 4.0;
        const double a = double(param_int(p, "num_heads")) - 8.0;
        return l * l + a * a;
    };
    // Unique optimum: relative_key_query, gelu_new, dropout 0.35, attention dropout 0.6.
    const auto mixed = [](const Params& p) {
        const double d = param_number(p, "dropout") - 0.35;
        const double a = param_number(p, "attention_dropout") - 0.6;
        return (param_string(p, "pos_type") == "relative_key_query" ? 0.0 : 1.0) +
               (param_string(p, "activation") == "gelu_new" ? 0.0 : 1.0) + 4.0 * d * d + 4.0 * a * a;
    };
    std::string detail;
    bool ok = true;
    for (const auto& [name, f] : std::vector<std::pair<std::string, std::function<double(const Params&)>>>{
             {"layers/heads quadratic", layers_heads}, {"mixed categorical/float", mixed}}) {
        std::vector<double> tpe, rnd;
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            tpe.push_back(best_value(space, f, SamplerKind::tpe, seed));
            rnd.push_back(best_value(space, f, SamplerKind::random, seed));
        }
        const double mt = median(tpe), mr = median(rnd);
        ok = ok && mt <= mr;
        detail += fmt("%s%s: median best TPE %.4g vs random %.4g", detail.empty() ? "" : "; ", name.c_str(), mt, mr);
    }
    return {ok, detail};
}

Outcome pruner_oracle() {
    std::size_t decisions = 0, prunes = 0, mismatches = 0;
    for (std::uint64_t s = 0; s < 200; ++s) {
        Rng rng = Rng::derive(2024, s);
        const MedianPrunerConfig cfg{std::size_t(rng.uniform_int(0, 6)), std::size_t(rng.uniform_int(0, 3))};
        const auto n_trials = std::size_t(rng.uniform_int(1, 20));
        std::vector<Trial> trials;
        for (std::size_t id = 0; id < n_trials; ++id) {
            Trial t;
            t.id = id;
            trials.push_back(t);
            const auto steps = std::size_t(rng.uniform_int(1, 8));
            for (std::size_t step = 0; step < steps; ++step) {
                // Mix of tied integers and continuous values.
                const double value = rng.bernoulli(0.5) ? double(rng.uniform_int(0, 6)) : rng.uniform(0.0, 6.0);
                trials.back().intermediate[step] = value;
                std::vector<double> prior;
                for (std::size_t j = 0; j < id; ++j) {
                    auto it = trials[j].intermediate.find(step);
                    if (it != trials[j].intermediate.end()) prior.push_back(it->second);
                }
                const bool expected = tinylm::testing::median_prune_oracle(prior, value, id, step,
                                                                           cfg.n_warmup_trials, cfg.n_warmup_steps);
                mismatches += should_prune(trials, id, step, value, cfg) != expected;
                ++decisions;
                if (expected) {
                    ++prunes;
                    trials.back().state = TrialState::pruned;
                    break;
                }
            }
            if (trials.back().state != TrialState::pruned) trials.back().state = TrialState::complete;
        }
    }
    return {mismatches == 0 && prunes > 0,
            fmt("200 streams, %zu decisions (%zu prunes), %zu mismatches", decisions, prunes, mismatches)};
}

Outcome zero_shot_agreement() {
    const auto data = tinylm::testing::make_agreement_data(5000, 1000, 8);
    TokenizerConfig tokc;
    tokc.vocab_size = 400;
    const auto tok = Tokenizer::train(data.train, tokc);

    ModelConfig mc;
    mc.objective = Objective::clm;
    mc.vocab_size = 400;
    mc.max_seq_len = 32;
    mc.num_layers = 2;
    mc.num_heads = 4;
    mc.head_size = 16;
    mc.ffn_size = 128;
    mc.pos_type = PositionType::absolute;
    mc.dropout = 0.1f;
    mc.attention_dropout = 0.1f;
    TrainConfig tc;
    tc.epochs = 15;
    tc.batch_size = 16;
    tc.grad_accum = 1;
    tc.learning_rate = 3e-3;
    tc.seed = 8;

    const auto packed = pack_corpus(tokenize_documents(tok, data.train), mc.max_seq_len);
    auto model = TransformerModel::init(mc, tc.seed);
    const auto log = train(model, packed, packed, tc, MaskingPolicy{});
    const auto acc = minimal_pair_accuracy(data.pairs, [&](const std::string& s) {
        return score_sentence(model, tok, s);
    });
    return {acc.overall() > 0.70, fmt("held-out pair accuracy %.1f%% on %zu pairs (chance 50%%), final train "
                                      "perplexity %.2f",
                                      100.0 * acc.overall(), acc.total, log.records().back().perplexity)};
}

Outcome metric_oracles() {
    Rng rng(99);
    std::size_t mismatches = 0, zero_den = 0;
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        // Every count is zero a quarter of the time so degenerate margins are common.
        auto draw = [&] { return rng.bernoulli(0.25) ? std::uint64_t(0) : std::uint64_t(rng.uniform_int(1, 40)); };
        std::uint64_t tp = draw(), tn = draw(), fp = draw(), fn = draw();
        if (tp + tn + fp + fn == 0) tn = 1;
        std::vector<int> preds, labels;
        auto add = [&](std::uint64_t n, int p, int l) {
            for (std::uint64_t k = 0; k < n; ++k) {
                preds.push_back(p);
                labels.push_back(l);
            }
        };
        add(tp, 1, 1);
        add(tn, 0, 0);
        add(fp, 1, 0);
        add(fn, 0, 1);
        // Shuffle so order cannot matter.
        for (std::size_t k = preds.size(); k > 1; --k) {
            const auto j = std::size_t(rng.uniform_int(0, std::int64_t(k) - 1));
            std::swap(preds[k - 1], preds[j]);
            std::swap(labels[k - 1], labels[j]);
        }
        const auto got = classification_metrics(preds, labels);
        const auto want = tinylm::testing::reference_metrics(tp, tn, fp, fn);
        zero_den += (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn) == 0;
        const double err = std::max({std::fabs(got.accuracy - want.accuracy), std::fabs(got.f1 - want.f1),
                                     std::fabs(got.mcc - want.mcc)});
        worst = std::max(worst, err);
        mismatches += err > 1e-12;
    }
    return {mismatches == 0 && zero_den > 0,
            fmt("1000 matrices (%zu with a zero MCC denominator), %zu mismatches, worst abs diff %.1e", zero_den,
                mismatches, worst)};
}

Outcome determinism_and_resume() {
    TempDir dir("acceptance");
    const auto space_path = (dir / "space.txt").string();
    write_file(space_path, SearchSpace::architecture().to_text());
    auto search = [&](const std::string& out) {
        int code = 0;
        cli_run({"search", "--space", space_path, "--objective", "constant", "--trials", "20", "--seed", "7", "--out",
                 out},
                code);
        return code;
    };
    const auto a = (dir / "a").string(), b = (dir / "b").string(), c = (dir / "c").string();
    if (search(a) != 0 || search(b) != 0) return {false, "search command failed"};
    const std::string log_a = read_file(dir / "a/study.jsonl");
    const bool identical = log_a == read_file(dir / "b/study.jsonl");

    // Interrupted run: keep everything up to the end of trial 9 plus a torn
    // write of trial 10's first event.
    const std::string marker = "\"trial\":10";
    const auto cut = log_a.find(marker);
    if (cut == std::string::npos) return {false, "trial 10 missing from the log"};
    const auto line_start = log_a.rfind('\n', cut) + 1;
    std::filesystem::create_directories(c);
    write_file(dir / "c/study.jsonl", log_a.substr(0, line_start) + log_a.substr(line_start, 12));
    const auto partial = load_study(dir / "c/study.jsonl");
    if (search(c) != 0) return {false, "resumed search failed"};
    const bool resumed = read_file(dir / "c/study.jsonl") == log_a;
    const bool summary = read_file(dir / "c/summary.tsv") == read_file(dir / "a/summary.tsv");
    return {identical && resumed && summary && partial.trials.size() == 10,
            fmt("two runs identical: %s; resumed after %zu trials identical: %s; summaries equal: %s",
                identical ? "yes" : "no", partial.trials.size(), resumed ? "yes" : "no", summary ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> criteria = {
        {1, "parameter counts", 1, parameter_counts},
        {2, "gradient suite", 120, gradient_suite},
        {3, "tokenizer properties", 60, tokenizer_properties},
        {4, "masking statistics", 30, masking_statistics},
        {5, "learnability", 1800, learnability},
        {6, "TPE vs random search", 120, tpe_vs_random},
        {7, "pruner oracle", 10, pruner_oracle},
        {8, "zero-shot agreement", 1200, zero_shot_agreement},
        {9, "metric oracles", 5, metric_oracles},
        {10, "search determinism and resume", 120, determinism_and_resume},
    };
    std::vector<int> only;
    for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));

    int failed = 0, ran = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.check();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_budget = secs <= c.budget_seconds;
        const bool pass = o.passed && in_budget;
        std::printf("%s [%d] %s: %s (%.2f s, budget %.0f s%s)\n", pass ? "PASS" : "FAIL", c.id, c.name.c_str(),
                    o.detail.c_str(), secs, c.budget_seconds, in_budget ? "" : ", over budget");
        std::fflush(stdout);
        failed += !pass;
        ++ran;
    }
    std::printf("%d/%d criteria passed\n", ran - failed, ran);
    return failed ? 1 : 0;
}
