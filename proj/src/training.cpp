#include "tinylm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "tinylm/error.hpp"

namespace tinylm {

void MaskingPolicy::validate() const {
    auto prob = [](double p, const char* name) {
        if (!(p >= 0.0 && p <= 1.0)) fail(ErrorKind::config, std::string("masking ") + name + " must lie in [0, 1]");
    };
    prob(select_prob, "select_prob");
    prob(mask_frac, "mask_frac");
    prob(random_frac, "random_frac");
    prob(keep_frac, "keep_frac");
    if (std::fabs(mask_frac + random_frac + keep_frac - 1.0) > 1e-9) {
        fail(ErrorKind::config, "masking fractions must sum to 1");
    }
}

MaskedSequence apply_mlm_masking(std::span<const int> ids, const MaskingPolicy& policy, std::size_t vocab_size,
                                 Rng& rng) {
    MaskedSequence out{std::vector<int>(ids.begin(), ids.end()), std::vector<int>(ids.size(), kIgnoreIndex)};
    const bool can_randomize = vocab_size > static_cast<std::size_t>(kNumSpecialTokens);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < kNumSpecialTokens) continue;
        if (!(rng.uniform() < policy.select_prob)) continue;
        out.labels[i] = ids[i];
        const double u = rng.uniform();
        if (u < policy.mask_frac) {
            out.inputs[i] = kMaskId;
        } else if (u < policy.mask_frac + policy.random_frac && can_randomize) {
            out.inputs[i] = static_cast<int>(rng.uniform_int(kNumSpecialTokens, static_cast<std::int64_t>(vocab_size) - 1));
        }
    }
    return out;
}

ShiftedSequence clm_shift(std::span<const int> ids) {
    if (ids.size() < 2) fail(ErrorKind::data, "causal shift needs at least 2 tokens, got " + std::to_string(ids.size()));
    if (std::all_of(ids.begin(), ids.end(), [](int id) { return id == kPadId; })) {
        fail(ErrorKind::data, "causal shift of an all-padding sequence");
    }
    ShiftedSequence out;
    out.inputs.assign(ids.begin(), ids.end() - 1);
    out.labels.assign(ids.begin() + 1, ids.end());
    for (auto& l : out.labels) {
        if (l == kPadId) l = kIgnoreIndex;
    }
    return out;
}

PackedDataset pack_corpus(const std::vector<std::vector<int>>& documents, std::size_t window) {
    if (window == 0) fail(ErrorKind::config, "packing window must be positive");
    PackedDataset out;
    out.window = window;
    bool any = false;
    for (const auto& doc : documents) {
        if (doc.empty()) continue;
        if (any) out.ids.push_back(kEosId);
        out.ids.insert(out.ids.end(), doc.begin(), doc.end());
        any = true;
    }
    if (!any) fail(ErrorKind::data, "cannot pack an empty corpus");
    const std::size_t rem = out.ids.size() % window;
    if (rem) out.ids.resize(out.ids.size() + (window - rem), kPadId);
    return out;
}

std::vector<std::vector<int>> tokenize_documents(const Tokenizer& tokenizer, std::span<const std::string> lines) {
    std::vector<std::vector<int>> docs;
    docs.reserve(lines.size());
    for (const auto& line : lines) {
        if (trim(line).empty()) continue;
        std::vector<int> doc{kBosId};
        auto ids = tokenizer.encode(line);
        doc.insert(doc.end(), ids.begin(), ids.end());
        docs.push_back(std::move(doc));
    }
    return docs;
}

// ---------------------------------------------------------------------------
// configuration

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) fail(ErrorKind::config, "learning_rate must be positive");
    if (epochs < 1) fail(ErrorKind::config, "epochs must be >= 1");
    if (batch_size < 1) fail(ErrorKind::config, "batch_size must be >= 1");
    if (grad_accum < 1) fail(ErrorKind::config, "grad_accum must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) fail(ErrorKind::config, "beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) fail(ErrorKind::config, "beta2 must lie in [0, 1)");
    if (!(adam_eps > 0.0)) fail(ErrorKind::config, "adam_eps must be positive");
    if (!(weight_decay >= 0.0)) fail(ErrorKind::config, "weight_decay must be non-negative");
    if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) fail(ErrorKind::config, "warmup_fraction must lie in [0, 1]");
    if (eval_batch_size < 1) fail(ErrorKind::config, "eval_batch_size must be >= 1");
}

void TrainConfig::read(KeyValueFile& kv) {
    auto count = [&](const char* key, std::size_t& field) {
        const auto v = kv.take_int(key, static_cast<std::int64_t>(field));
        if (v < 0) fail(ErrorKind::config, std::string(key) + " must be non-negative");
        field = static_cast<std::size_t>(v);
    };
    learning_rate = kv.take_double("learning_rate", learning_rate);
    beta1 = kv.take_double("beta1", beta1);
    beta2 = kv.take_double("beta2", beta2);
    adam_eps = kv.take_double("adam_eps", adam_eps);
    weight_decay = kv.take_double("weight_decay", weight_decay);
    count("epochs", epochs);
    count("batch_size", batch_size);
    count("grad_accum", grad_accum);
    warmup_fraction = kv.take_double("warmup_fraction", warmup_fraction);
    seed = static_cast<std::uint64_t>(kv.take_int("seed", static_cast<std::int64_t>(seed)));
    eval_seed = static_cast<std::uint64_t>(kv.take_int("eval_seed", static_cast<std::int64_t>(eval_seed)));
    count("eval_batch_size", eval_batch_size);
}

std::string TrainConfig::to_text() const {
    return format_key_values({
        {"learning_rate", format_double(learning_rate)},
        {"beta1", format_double(beta1)},
        {"beta2", format_double(beta2)},
        {"adam_eps", format_double(adam_eps)},
        {"weight_decay", format_double(weight_decay)},
        {"epochs", std::to_string(epochs)},
        {"batch_size", std::to_string(batch_size)},
        {"grad_accum", std::to_string(grad_accum)},
        {"warmup_fraction", format_double(warmup_fraction)},
        {"seed", std::to_string(seed)},
        {"eval_seed", std::to_string(eval_seed)},
        {"eval_batch_size", std::to_string(eval_batch_size)},
    });
}

// ---------------------------------------------------------------------------
// optimizer and schedule

void adamw_step(std::span<float> params, std::span<const float> grads, AdamState& state, std::size_t step, double lr,
                double weight_decay, const TrainConfig& config) {
    if (params.size() != grads.size()) {
        fail(ErrorKind::dimension, "adamw: " + std::to_string(params.size()) + " parameters but " +
                                       std::to_string(grads.size()) + " gradients");
    }
    if (step < 1) fail(ErrorKind::usage, "adamw step count starts at 1");
    for (float g : grads) {
        if (!std::isfinite(g)) fail(ErrorKind::numeric, "non-finite gradient; optimizer step aborted");
    }
    if (state.m.size() != params.size()) {
        state.m.assign(params.size(), 0.0f);
        state.v.assign(params.size(), 0.0f);
    }
    const double b1 = config.beta1, b2 = config.beta2;
    const double c1 = 1.0 - std::pow(b1, double(step));
    const double c2 = 1.0 - std::pow(b2, double(step));
    const double shrink = 1.0 - lr * weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        const double m = b1 * state.m[i] + (1.0 - b1) * g;
        const double v = b2 * state.v[i] + (1.0 - b2) * g * g;
        state.m[i] = static_cast<float>(m);
        state.v[i] = static_cast<float>(v);
        const double update = (m / c1) / (std::sqrt(v / c2) + config.adam_eps);
        params[i] = static_cast<float>(double(params[i]) * shrink - lr * update);
    }
}

double scheduled_lr(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double peak) {
    if (total_steps == 0) return 0.0;
    step = std::min(step, total_steps);
    warmup_steps = std::min(warmup_steps, total_steps);
    if (step <= warmup_steps && warmup_steps > 0) return peak * double(step) / double(warmup_steps);
    if (total_steps == warmup_steps) return 0.0;
    return peak * double(total_steps - step) / double(total_steps - warmup_steps);
}

// ---------------------------------------------------------------------------
// batches

namespace {

struct Batch {
    std::vector<int> inputs;
    std::vector<std::uint8_t> attention;
    std::vector<int> labels;
    std::size_t rows = 0;
    std::size_t length = 0;
};

// Builds the supervised view of one window for the model's objective.
void add_window(Batch& batch, const TransformerModel& model, std::span<const int> window, const MaskingPolicy& policy,
                Rng& mask_rng) {
    std::vector<int> inputs, labels;
    if (model.config().is_encoder()) {
        auto masked = apply_mlm_masking(window, policy, model.config().vocab_size, mask_rng);
        inputs = std::move(masked.inputs);
        labels = std::move(masked.labels);
    } else {
        auto shifted = clm_shift(window);
        inputs = std::move(shifted.inputs);
        labels = std::move(shifted.labels);
    }
    batch.length = inputs.size();
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        batch.attention.push_back(inputs[i] == kPadId ? 0 : 1);
    }
    batch.inputs.insert(batch.inputs.end(), inputs.begin(), inputs.end());
    batch.labels.insert(batch.labels.end(), labels.begin(), labels.end());
    ++batch.rows;
}

std::size_t supervised(const Batch& b) {
    return static_cast<std::size_t>(std::count_if(b.labels.begin(), b.labels.end(), [](int l) { return l != kIgnoreIndex; }));
}

// Summed cross-entropy divided by `normalizer`, computed only at supervised rows.
Tensor batch_loss(const TransformerModel& model, const Batch& batch, double normalizer, bool training, Rng& rng) {
    const std::size_t d = model.config().hidden_size();
    Tensor hidden = model.hidden_states(batch.inputs, batch.attention, batch.rows, batch.length, training, rng);
    std::vector<int> rows;
    std::vector<int> labels;
    for (std::size_t i = 0; i < batch.labels.size(); ++i) {
        if (batch.labels[i] != kIgnoreIndex) {
            rows.push_back(static_cast<int>(i));
            labels.push_back(batch.labels[i]);
        }
    }
    Tensor picked = embedding(reshape(hidden, {batch.rows * batch.length, d}), rows, {rows.size()});
    CrossEntropyOptions opt;
    opt.normalizer = normalizer;
    return cross_entropy(model.lm_logits(picked), labels, opt);
}

Rng window_mask_rng(std::uint64_t seed, std::size_t epoch, std::size_t window) {
    return Rng::derive(mix_seed(seed, epoch), window);
}

}  // namespace

PerplexityResult evaluate_perplexity(const TransformerModel& model, const PackedDataset& data,
                                     const MaskingPolicy& policy, std::uint64_t eval_seed, std::size_t batch_size) {
    if (data.size() == 0) fail(ErrorKind::data, "evaluation dataset is empty");
    if (batch_size == 0) batch_size = 1;
    NoGradScope no_grad;
    Rng unused(0);
    double total = 0.0;
    std::size_t tokens = 0;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        Batch batch;
        for (std::size_t w = start; w < std::min(data.size(), start + batch_size); ++w) {
            Rng mask_rng = Rng::derive(eval_seed, w);
            add_window(batch, model, data.at(w), policy, mask_rng);
        }
        const std::size_t n = supervised(batch);
        if (n == 0) continue;
        total += double(batch_loss(model, batch, 1.0, false, unused).item());
        tokens += n;
    }
    if (tokens == 0) fail(ErrorKind::data, "evaluation dataset has no supervised positions");
    PerplexityResult r;
    r.tokens = tokens;
    r.loss = total / double(tokens);
    r.perplexity = std::exp(r.loss);
    if (!std::isfinite(r.loss)) fail(ErrorKind::numeric, "evaluation loss is not finite");
    return r;
}

// ---------------------------------------------------------------------------
// trainer

Trainer::Trainer(TransformerModel& model, const TrainConfig& config, const MaskingPolicy& policy, std::size_t total_steps)
    : model_(model),
      config_(config),
      policy_(policy),
      state_(model.parameters().size()),
      total_steps_(total_steps),
      warmup_steps_(static_cast<std::size_t>(std::llround(config.warmup_fraction * double(total_steps)))),
      dropout_rng_(Rng::derive(config.seed, 0x64726f70ULL)) {
    config_.validate();
    if (model.config().is_encoder()) policy_.validate();
}

double Trainer::accumulate(const PackedDataset& data, std::span<const std::size_t> windows, std::size_t epoch) {
    std::vector<Batch> batches;
    for (std::size_t start = 0; start < windows.size(); start += config_.batch_size) {
        Batch b;
        for (std::size_t k = start; k < std::min(windows.size(), start + config_.batch_size); ++k) {
            Rng mask_rng = window_mask_rng(config_.seed, epoch, windows[k]);
            add_window(b, model_, data.at(windows[k]), policy_, mask_rng);
        }
        batches.push_back(std::move(b));
    }
    std::size_t total = 0;
    for (const auto& b : batches) total += supervised(b);
    last_supervised_ = total;
    if (total == 0) return 0.0;

    double loss_sum = 0.0;
    for (const auto& b : batches) {
        if (supervised(b) == 0) continue;
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = batch_loss(model_, b, double(total), true, dropout_rng_);
        tape.backward(loss);
        loss_sum += double(loss.item());
    }
    return loss_sum;
}

void Trainer::zero_grad() {
    for (auto& p : model_.parameters()) p.tensor.zero_grad();
}

void Trainer::apply_step() {
    auto& params = model_.parameters();
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (float g : p.tensor.grad()) {
            if (!std::isfinite(g)) {
                zero_grad();
                fail(ErrorKind::numeric, "non-finite gradient in '" + p.name + "'; optimizer step aborted");
            }
        }
    }
    ++step_;
    const double lr = scheduled_lr(step_, total_steps_, warmup_steps_, config_.learning_rate);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& t = params[i].tensor;
        const double decay = t.rank() >= 2 ? config_.weight_decay : 0.0;
        adamw_step(t.mutable_data(), t.grad(), state_[i], step_, lr, decay, config_);
    }
    zero_grad();
}

// ---------------------------------------------------------------------------
// metrics

void MetricsLog::append(const EpochRecord& record) {
    if (!records_.empty() && record.epoch <= records_.back().epoch) {
        fail(ErrorKind::usage, "metrics epochs must increase");
    }
    records_.push_back(record);
}

std::string MetricsLog::to_json_line(const EpochRecord& r) {
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["train_loss"] = r.train_loss;
    j["val_loss"] = r.val_loss;
    j["perplexity"] = r.perplexity;
    j["wall_time"] = r.wall_time;
    return j.dump();
}

std::string MetricsLog::to_jsonl() const {
    std::string out;
    for (const auto& r : records_) out += to_json_line(r) + "\n";
    return out;
}

MetricsLog MetricsLog::load(const std::filesystem::path& path) {
    MetricsLog log;
    for (const auto& line : split(read_file(path), '\n')) {
        if (trim(line).empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            EpochRecord r;
            r.epoch = j.at("epoch").get<std::size_t>();
            r.train_loss = j.at("train_loss").get<double>();
            r.val_loss = j.at("val_loss").get<double>();
            r.perplexity = j.at("perplexity").get<double>();
            r.wall_time = j.at("wall_time").get<double>();
            log.append(r);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::data, path.string() + ": bad metrics line: " + e.what());
        }
    }
    return log;
}

// ---------------------------------------------------------------------------

MetricsLog train(TransformerModel& model, const PackedDataset& train_data, const PackedDataset& val_data,
                 const TrainConfig& config, const MaskingPolicy& policy, const EpochCallback& on_epoch) {
    config.validate();
    if (train_data.size() == 0) fail(ErrorKind::data, "training dataset is empty");
    const std::size_t group = config.batch_size * config.grad_accum;
    const std::size_t steps_per_epoch = (train_data.size() + group - 1) / group;
    Trainer trainer(model, config, policy, steps_per_epoch * config.epochs);

    MetricsLog log;
    if (!config.metrics_path.empty()) write_file(config.metrics_path, "");

    std::vector<std::size_t> order(train_data.size());
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle = Rng::derive(config.seed, 0x5000 + epoch);
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.uniform_int(0, std::int64_t(i) - 1))]);
        }

        double loss_sum = 0.0;
        std::size_t tokens = 0;
        for (std::size_t start = 0; start < order.size(); start += group) {
            const std::size_t n = std::min(group, order.size() - start);
            const double loss = trainer.accumulate(train_data, std::span<const std::size_t>(order).subspan(start, n), epoch);
            loss_sum += loss * double(trainer.last_supervised());
            tokens += trainer.last_supervised();
            trainer.apply_step();
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = tokens ? loss_sum / double(tokens) : 0.0;
        if (!std::isfinite(rec.train_loss)) fail(ErrorKind::numeric, "training loss diverged in epoch " + std::to_string(epoch));
        const auto val = evaluate_perplexity(model, val_data, policy, config.eval_seed, config.eval_batch_size);
        rec.val_loss = val.loss;
        rec.perplexity = val.perplexity;
        rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.append(rec);
        if (!config.metrics_path.empty()) {
            std::ofstream out(config.metrics_path, std::ios::app);
            out << MetricsLog::to_json_line(rec) << "\n";
            if (!out) fail(ErrorKind::io, "cannot append to " + config.metrics_path.string());
        }
        if (!config.checkpoint_dir.empty()) model.save(config.checkpoint_dir / ("epoch-" + std::to_string(epoch)));
        if (on_epoch && !on_epoch(rec, model)) break;
    }
    return log;
}

}  // namespace tinylm
