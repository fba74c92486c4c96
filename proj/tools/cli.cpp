#include "cli.hpp"

#include <cstdio>
#include <functional>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "run_manifest.hpp"
#include "tinylm/data.hpp"
#include "tinylm/error.hpp"
#include "tinylm/eval.hpp"
#include "tinylm/kvfile.hpp"
#include "tinylm/model.hpp"
#include "tinylm/search.hpp"
#include "tinylm/tokenizer.hpp"
#include "tinylm/training.hpp"

#ifndef TINYLM_VERSION
#define TINYLM_VERSION "0.0.0"
#endif

namespace tinylm::cli {

namespace {

namespace fs = std::filesystem;

struct Invocation {
    std::string command;
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::string manifest;
    fs::path out_dir;  // manifest goes here when --manifest is absent
    std::vector<std::pair<std::string, std::string>> config;
    std::vector<fs::path> inputs;

    void input(const fs::path& p) { inputs.push_back(p); }
    void resolved(const std::string& key, const std::string& value) { config.emplace_back(key, value); }
};

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

void write_output(const fs::path& path, const std::string& text, std::ostream& out) {
    if (path.empty()) {
        out << text;
    } else {
        write_file(path, text);
        out << text;
    }
}

// Model and tokenizer files share one directory unless a tokenizer is given.
struct LoadedModel {
    TransformerModel model;
    Tokenizer tokenizer;
};

LoadedModel load_model(const fs::path& model_dir, const std::string& tokenizer_dir, Invocation& inv) {
    const fs::path tok_dir = tokenizer_dir.empty() ? model_dir : fs::path(tokenizer_dir);
    inv.input(model_dir);
    if (!tokenizer_dir.empty()) inv.input(tok_dir);
    LoadedModel m{TransformerModel::load(model_dir), Tokenizer::load(tok_dir)};
    if (m.tokenizer.vocab_size() > m.model.config().vocab_size) {
        fail(ErrorKind::config, "tokenizer has " + std::to_string(m.tokenizer.vocab_size()) +
                                    " tokens but the model vocabulary is " + std::to_string(m.model.config().vocab_size));
    }
    return m;
}

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
};

RunConfig read_run_config(const fs::path& path) {
    auto kv = KeyValueFile::load(path);
    RunConfig c;
    c.model.read(kv);
    c.train.read(kv);
    kv.finish();
    c.model.validate();
    c.train.validate();
    return c;
}

Tokenizer tokenizer_for(const std::string& tokenizer_dir, const Corpus& corpus, std::size_t vocab_size,
                        Invocation& inv) {
    if (!tokenizer_dir.empty()) {
        inv.input(tokenizer_dir);
        return Tokenizer::load(tokenizer_dir);
    }
    TokenizerConfig tc;
    tc.vocab_size = vocab_size;
    const auto lines = corpus.all_lines();
    return Tokenizer::train(lines, tc);
}

PackedDataset pack_lines(const Tokenizer& tok, const Corpus& corpus, std::size_t window) {
    const auto lines = corpus.all_lines();
    return pack_corpus(tokenize_documents(tok, lines), window);
}

// ---------------------------------------------------------------------------
// commands

struct TokenizerTrainArgs {
    std::string corpus, out;
    std::size_t vocab_size = 0;
    bool lowercase = false;
};

void cmd_tokenizer_train(const TokenizerTrainArgs& a, Invocation& inv, std::ostream& out) {
    TokenizerConfig tc;
    tc.vocab_size = a.vocab_size;
    tc.lowercase = a.lowercase;
    tc.validate();
    inv.out_dir = a.out;
    inv.input(a.corpus);
    const auto corpus = load_corpus(fs::path(a.corpus));
    const auto lines = corpus.all_lines();
    const auto tok = Tokenizer::train(lines, tc);
    tok.save(a.out);
    out << "vocab_size\t" << tok.vocab_size() << "\nmerges\t" << tok.merges().size() << "\n";
}

struct StatsArgs {
    std::string corpus, tokenizer, out;
};

void cmd_stats(const StatsArgs& a, Invocation& inv, std::ostream& out, std::ostream& err) {
    inv.input(a.corpus);
    inv.input(a.tokenizer);
    const auto tok = Tokenizer::load(a.tokenizer);
    const auto corpus = load_corpus(fs::path(a.corpus));
    if (corpus.replacements) {
        err << "tinylm-warning: " << corpus.replacements << " invalid UTF-8 sequences replaced\n";
    }
    write_output(a.out, compute_stats(corpus, tok).to_tsv(), out);
}

struct PretrainArgs {
    std::string config, corpus, val, out, tokenizer;
};

void cmd_pretrain(const PretrainArgs& a, Invocation& inv, std::ostream& out) {
    inv.input(a.config);
    inv.input(a.corpus);
    inv.input(a.val);
    inv.out_dir = a.out;
    auto rc = read_run_config(a.config);
    if (inv.seed_given) rc.train.seed = inv.seed;
    inv.seed = rc.train.seed;
    const fs::path dir(a.out);
    rc.train.checkpoint_dir = dir / "checkpoints";
    rc.train.metrics_path = dir / "metrics.jsonl";
    inv.resolved("model", rc.model.to_text());
    inv.resolved("train", rc.train.to_text());

    const auto train_corpus = load_corpus(fs::path(a.corpus));
    const auto val_corpus = load_corpus(fs::path(a.val));
    const auto tok = tokenizer_for(a.tokenizer, train_corpus, rc.model.vocab_size, inv);
    if (tok.vocab_size() > rc.model.vocab_size) {
        fail(ErrorKind::config, "tokenizer has " + std::to_string(tok.vocab_size()) + " tokens but vocab_size is " +
                                    std::to_string(rc.model.vocab_size));
    }
    const auto train_data = pack_lines(tok, train_corpus, rc.model.max_seq_len);
    const auto val_data = pack_lines(tok, val_corpus, rc.model.max_seq_len);

    auto model = TransformerModel::init(rc.model, rc.train.seed);
    const auto log = train(model, train_data, val_data, rc.train, MaskingPolicy{});
    tok.save(dir / "tokenizer");
    model.save(dir / "model");
    tok.save(dir / "model");

    std::string table = "epoch\ttrain_loss\tval_loss\tperplexity\n";
    for (const auto& r : log.records()) {
        table += std::to_string(r.epoch) + "\t" + fixed(r.train_loss, 4) + "\t" + fixed(r.val_loss, 4) + "\t" +
                 fixed(r.perplexity, 2) + "\n";
    }
    out << table;
}

struct SearchArgs {
    std::string space, corpus, val, out, config, tokenizer, objective = "pretrain", sampler = "tpe";
    std::size_t trials = 100, workers = 1, epochs = 10;
    bool no_prune = false;
};

double quadratic_objective(const SearchSpace& space, const Params& params) {
    double f = 0.0;
    for (const auto& p : space.params) {
        if (p.kind == ParamKind::categorical) {
            f += param_string(params, p.name) == p.choices.front() ? 0.0 : 1.0;
        } else {
            const double mid = 0.5 * (p.low + p.high);
            const double span = p.high > p.low ? p.high - p.low : 1.0;
            const double z = (param_number(params, p.name) - mid) / span;
            f += z * z;
        }
    }
    return f;
}

void cmd_search(const SearchArgs& a, Invocation& inv, std::ostream& out) {
    inv.input(a.space);
    inv.out_dir = a.out;
    const auto space = SearchSpace::load(a.space);
    StudyOptions opt;
    opt.n_trials = a.trials;
    opt.seed = inv.seed;
    opt.sampler = parse_sampler(a.sampler);
    opt.workers = a.workers;
    opt.prune = !a.no_prune;
    opt.store = fs::path(a.out) / "study.jsonl";
    if (a.trials == 0) fail(ErrorKind::config, "--trials must be at least 1");

    ObjectiveFn objective;
    std::string value_label = "Avg. objective";
    std::optional<PackedDataset> train_data, val_data;
    PretrainObjective pretrain;
    if (a.objective == "constant") {
        objective = [](TrialContext&) { return 1.0; };
    } else if (a.objective == "quadratic") {
        objective = [&space](TrialContext& t) { return quadratic_objective(space, t.params()); };
    } else if (a.objective == "pretrain") {
        if (a.corpus.empty() || a.val.empty()) fail(ErrorKind::usage, "the pretrain objective needs --corpus and --val");
        inv.input(a.corpus);
        inv.input(a.val);
        RunConfig rc{bebeshka_config(), TrainConfig{}};
        if (!a.config.empty()) {
            inv.input(a.config);
            rc = read_run_config(a.config);
        }
        rc.train.seed = inv.seed;
        rc.train.epochs = a.epochs;
        rc.train.validate();
        const auto train_corpus = load_corpus(fs::path(a.corpus));
        const auto val_corpus = load_corpus(fs::path(a.val));
        const auto tok = tokenizer_for(a.tokenizer, train_corpus, rc.model.vocab_size, inv);
        if (tok.vocab_size() > rc.model.vocab_size) fail(ErrorKind::config, "tokenizer is larger than vocab_size");
        train_data = pack_lines(tok, train_corpus, rc.model.max_seq_len);
        val_data = pack_lines(tok, val_corpus, rc.model.max_seq_len);
        pretrain.base = rc.model;
        pretrain.train = rc.train;
        pretrain.train_data = &*train_data;
        pretrain.val_data = &*val_data;
        objective = std::cref(pretrain);
        value_label = "Avg. perplexity";
        inv.resolved("model", rc.model.to_text());
        inv.resolved("train", rc.train.to_text());
    } else {
        fail(ErrorKind::usage, "unknown objective '" + a.objective + "' (expected pretrain, constant or quadratic)");
    }
    inv.resolved("space", space.to_text());

    const auto study = run_study(space, objective, opt);
    const auto summary = summarize_study(study, space).to_tsv(space, value_label);
    write_file(fs::path(a.out) / "summary.tsv", summary);
    std::size_t complete = 0, pruned = 0, failed = 0;
    for (const auto& t : study.trials) {
        complete += t.state == TrialState::complete;
        pruned += t.state == TrialState::pruned;
        failed += t.state == TrialState::failed;
    }
    out << summary << "trials\t" << study.trials.size() << "\tcomplete\t" << complete << "\tpruned\t" << pruned
        << "\tfailed\t" << failed << "\n";
    if (const auto* best = study.best()) {
        out << "best_trial\t" << best->id << "\tvalue\t" << format_double(*best->value) << "\n";
    }
}

struct ParamsArgs {
    std::string config, preset;
};

void cmd_params(const ParamsArgs& a, Invocation& inv, std::ostream& out) {
    ModelConfig config;
    if (!a.config.empty() && !a.preset.empty()) fail(ErrorKind::usage, "give either --config or --preset");
    if (!a.config.empty()) {
        inv.input(a.config);
        config = read_run_config(a.config).model;
    } else if (a.preset == "bebeshka") {
        config = bebeshka_config();
    } else if (a.preset == "zlata") {
        config = zlata_config();
    } else {
        fail(ErrorKind::usage, a.preset.empty() ? "params needs --config or --preset" : "unknown preset '" + a.preset + "'");
    }
    inv.resolved("model", config.to_text());
    std::string text = "parameters\t" + std::to_string(param_count(config)) + "\n";
    for (const auto& spec : parameter_manifest(config)) text += spec.name + "\t" + shape_to_string(spec.shape) + "\n";
    out << text;
}

struct EvalPairsArgs {
    std::string model, pairs, tokenizer, name, out;
    bool normalize = false;
};

void cmd_eval_pairs(const EvalPairsArgs& a, Invocation& inv, std::ostream& out) {
    auto m = load_model(a.model, a.tokenizer, inv);
    inv.input(a.pairs);
    const auto pairs = load_minimal_pairs(a.pairs);
    const auto acc = minimal_pair_accuracy(pairs, [&](const std::string& s) {
        return score_sentence(m.model, m.tokenizer, s, a.normalize);
    });
    const std::string name = a.name.empty() ? fs::path(a.model).filename().string() : a.name;
    write_output(a.out, acc.to_tsv(name), out);
}

struct FinetuneArgs {
    std::string model, task, eval, preset = "encoder", tokenizer, out;
    std::optional<double> lr;
    std::optional<std::size_t> epochs, batch_size;
    bool class_weighted = false;
};

void cmd_finetune(const FinetuneArgs& a, Invocation& inv, std::ostream& out) {
    FinetuneConfig fc;
    if (a.preset == "encoder") fc = FinetuneConfig::encoder_preset();
    else if (a.preset == "decoder") fc = FinetuneConfig::decoder_preset();
    else fail(ErrorKind::usage, "unknown preset '" + a.preset + "' (expected encoder or decoder)");
    if (a.lr) fc.learning_rate = *a.lr;
    if (a.epochs) fc.epochs = *a.epochs;
    if (a.batch_size) fc.batch_size = *a.batch_size;
    fc.class_weighted = a.class_weighted;
    fc.seed = inv.seed;
    fc.validate();
    inv.resolved("learning_rate", format_double(fc.learning_rate));
    inv.resolved("epochs", std::to_string(fc.epochs));
    inv.resolved("batch_size", std::to_string(fc.batch_size));
    if (!a.out.empty()) inv.out_dir = a.out;

    auto m = load_model(a.model, a.tokenizer, inv);
    inv.input(a.task);
    auto train_set = load_classification_tsv(a.task);
    std::vector<ClassificationExample> eval_set;
    if (!a.eval.empty()) {
        inv.input(a.eval);
        eval_set = load_classification_tsv(a.eval);
    } else {
        // hold out every fifth example of a seeded shuffle
        Rng rng(fc.seed);
        for (std::size_t i = train_set.size(); i > 1; --i) {
            std::swap(train_set[i - 1], train_set[std::size_t(rng.uniform_int(0, std::int64_t(i) - 1))]);
        }
        std::vector<ClassificationExample> keep;
        for (std::size_t i = 0; i < train_set.size(); ++i) (i % 5 == 4 ? eval_set : keep).push_back(train_set[i]);
        train_set = std::move(keep);
        if (eval_set.empty()) fail(ErrorKind::data, "task too small to hold out evaluation examples; pass --eval");
    }
    const auto result = finetune_classifier(m.model, m.tokenizer, train_set, eval_set, fc);
    const std::string text = "Task\tMCC\tAcc.\tF1\n" + fs::path(a.task).stem().string() + "\t" +
                             fixed(result.metrics.mcc, 4) + "\t" + fixed(result.metrics.accuracy, 4) + "\t" +
                             fixed(result.metrics.f1, 4) + "\n";
    write_output(a.out.empty() ? fs::path() : fs::path(a.out) / "metrics.tsv", text, out);
}

struct ScoreArgs {
    std::string model, text, tokenizer;
    bool normalize = false;
};

void cmd_score(const ScoreArgs& a, Invocation& inv, std::ostream& out) {
    auto m = load_model(a.model, a.tokenizer, inv);
    inv.resolved("text", a.text);
    out << format_double(score_sentence(m.model, m.tokenizer, a.text, a.normalize)) << "\n";
}

void record_options(const CLI::App* sub, Invocation& inv) {
    for (const auto* opt : sub->get_options()) {
        if (opt->count() == 0 || opt->get_name() == "--help") continue;
        std::string value;
        for (const auto& r : opt->results()) value += (value.empty() ? "" : " ") + r;
        inv.config.emplace_back(opt->get_name(), value.empty() ? "true" : value);
    }
}

void emit_manifest(Invocation& inv, const std::string& started, std::ostream& err) {
    RunManifest m;
    m.command = inv.command;
    m.version = TINYLM_VERSION;
    m.seed = inv.seed;
    m.config = inv.config;
    for (const auto& p : inv.inputs) m.inputs.emplace_back(p.string(), digest_path(p));
    m.started = started;
    m.finished = utc_timestamp();
    const std::string json = m.to_json();
    if (!inv.manifest.empty()) {
        write_file(inv.manifest, json);
    } else if (!inv.out_dir.empty()) {
        write_file(inv.out_dir / "run_manifest.json", json);
    } else {
        err << "tinylm-manifest: " << nlohmann::ordered_json::parse(json).dump() << "\n";
    }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"tinylm: tokenizer, pretraining, architecture search and evaluation for small language models", "tinylm"};
    app.set_version_flag("--version", TINYLM_VERSION);
    app.require_subcommand(1);

    Invocation inv;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--seed", inv.seed, "Seed for every random choice of the command");
        sub->add_option("--manifest", inv.manifest, "Where to write the run manifest (JSON)");
    };

    TokenizerTrainArgs tt;
    auto* tokenizer = app.add_subcommand("tokenizer", "Tokenizer operations");
    tokenizer->require_subcommand(1);
    auto* tok_train = tokenizer->add_subcommand("train", "Train a byte-level BPE tokenizer");
    tok_train->add_option("--corpus", tt.corpus, "Corpus file or directory")->required();
    tok_train->add_option("--vocab-size", tt.vocab_size, "Vocabulary size including special tokens")->required();
    tok_train->add_flag("--lowercase", tt.lowercase, "Case-fold before training and encoding");
    tok_train->add_option("--out", tt.out, "Output directory")->required();
    common(tok_train);

    StatsArgs st;
    auto* stats = app.add_subcommand("stats", "Per-source corpus statistics table");
    stats->add_option("--corpus", st.corpus, "Corpus file or directory")->required();
    stats->add_option("--tokenizer", st.tokenizer, "Tokenizer directory")->required();
    stats->add_option("--out", st.out, "Also write the table to this file");
    common(stats);

    PretrainArgs pt;
    auto* pretrain = app.add_subcommand("pretrain", "Pretrain a model from a config file");
    pretrain->add_option("--config", pt.config, "Model and training config (key = value)")->required();
    pretrain->add_option("--corpus", pt.corpus, "Training corpus")->required();
    pretrain->add_option("--val", pt.val, "Validation corpus")->required();
    pretrain->add_option("--out", pt.out, "Output directory")->required();
    pretrain->add_option("--tokenizer", pt.tokenizer, "Existing tokenizer (default: train one on the corpus)");
    common(pretrain);

    SearchArgs sa;
    auto* search = app.add_subcommand("search", "Architecture search with TPE and median pruning");
    search->add_option("--space", sa.space, "Search space file")->required();
    search->add_option("--corpus", sa.corpus, "Training corpus (pretrain objective)");
    search->add_option("--val", sa.val, "Validation corpus (pretrain objective)");
    search->add_option("--trials", sa.trials, "Number of trials")->required();
    search->add_option("--out", sa.out, "Output directory; an existing study log is resumed")->required();
    search->add_option("--workers", sa.workers, "Parallel trial slots");
    search->add_option("--sampler", sa.sampler, "tpe or random");
    search->add_option("--objective", sa.objective, "pretrain, constant or quadratic");
    search->add_option("--config", sa.config, "Base model and training config (pretrain objective)");
    search->add_option("--epochs", sa.epochs, "Epochs per trial (pretrain objective)");
    search->add_option("--tokenizer", sa.tokenizer, "Existing tokenizer (pretrain objective)");
    search->add_flag("--no-prune", sa.no_prune, "Disable median pruning");
    common(search);

    ParamsArgs pa;
    auto* params = app.add_subcommand("params", "Parameter count and tensor manifest");
    params->add_option("--config", pa.config, "Model config file");
    params->add_option("--preset", pa.preset, "bebeshka or zlata");
    common(params);

    EvalPairsArgs ep;
    auto* eval = app.add_subcommand("eval", "Evaluation");
    eval->require_subcommand(1);
    auto* pairs = eval->add_subcommand("pairs", "Zero-shot minimal-pair accuracy");
    pairs->add_option("--model", ep.model, "Model directory")->required();
    pairs->add_option("--pairs", ep.pairs, "Minimal pairs (JSON lines)")->required();
    pairs->add_option("--tokenizer", ep.tokenizer, "Tokenizer directory (default: the model directory)");
    pairs->add_option("--name", ep.name, "Row label in the report");
    pairs->add_option("--out", ep.out, "Also write the table to this file");
    pairs->add_flag("--normalize", ep.normalize, "Divide scores by the token count");
    common(pairs);

    FinetuneArgs ft;
    auto* finetune = app.add_subcommand("finetune", "Fine-tune a sequence classifier");
    finetune->add_option("--model", ft.model, "Model directory")->required();
    finetune->add_option("--task", ft.task, "Training examples (TSV)")->required();
    finetune->add_option("--eval", ft.eval, "Evaluation examples (default: hold out 20% of the task)");
    finetune->add_option("--preset", ft.preset, "encoder or decoder");
    finetune->add_option("--tokenizer", ft.tokenizer, "Tokenizer directory (default: the model directory)");
    finetune->add_option("--lr", ft.lr, "Override the preset learning rate");
    finetune->add_option("--epochs", ft.epochs, "Override the preset epoch count");
    finetune->add_option("--batch-size", ft.batch_size, "Override the preset batch size");
    finetune->add_flag("--class-weighted", ft.class_weighted, "Weight the loss by inverse class frequency");
    finetune->add_option("--out", ft.out, "Directory for metrics.tsv and the manifest");
    common(finetune);

    ScoreArgs sc;
    auto* score = app.add_subcommand("score", "Log-likelihood of one sentence");
    score->add_option("--model", sc.model, "Model directory")->required();
    score->add_option("--text", sc.text, "Sentence")->required();
    score->add_option("--tokenizer", sc.tokenizer, "Tokenizer directory (default: the model directory)");
    score->add_flag("--normalize", sc.normalize, "Divide by the token count");
    common(score);

    std::vector<std::string> argv_storage{"tinylm"};
    argv_storage.insert(argv_storage.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& s : argv_storage) argv.push_back(s.data());
    try {
        app.parse(int(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "tinylm-error: usage: " << e.what() << "\n";
        return 2;
    }

    const std::string started = utc_timestamp();
    try {
        const std::vector<std::pair<CLI::App*, std::function<void()>>> handlers = {
            {tok_train, [&] { cmd_tokenizer_train(tt, inv, out); }},
            {stats, [&] { cmd_stats(st, inv, out, err); }},
            {pretrain, [&] { cmd_pretrain(pt, inv, out); }},
            {search, [&] { cmd_search(sa, inv, out); }},
            {params, [&] { cmd_params(pa, inv, out); }},
            {pairs, [&] { cmd_eval_pairs(ep, inv, out); }},
            {finetune, [&] { cmd_finetune(ft, inv, out); }},
            {score, [&] { cmd_score(sc, inv, out); }},
        };
        for (const auto& [sub, handler] : handlers) {
            if (!sub->parsed()) continue;
            inv.command = sub->get_parent() == &app ? sub->get_name() : sub->get_parent()->get_name() + " " + sub->get_name();
            inv.seed_given = sub->count("--seed") > 0;
            record_options(sub, inv);
            handler();
            emit_manifest(inv, started, err);
            out.flush();
            return 0;
        }
        err << "tinylm-error: usage: no command given\n";
        return 2;
    } catch (const Error& e) {
        err << "tinylm-error: " << to_string(e.kind()) << ": " << e.what() << "\n";
        return 1;
    } catch (const std::bad_alloc&) {
        err << "tinylm-error: resource: out of memory\n";
        return 1;
    } catch (const std::exception& e) {
        err << "tinylm-error: internal: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace tinylm::cli
