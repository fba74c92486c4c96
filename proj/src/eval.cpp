#include "tinylm/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include <json.hpp>

#include "tinylm/error.hpp"
#include "tinylm/kvfile.hpp"
#include "tinylm/ops.hpp"
#include "tinylm/training.hpp"

namespace tinylm {

namespace {

double log_prob(std::span<const float> row, int target) {
    double hi = -std::numeric_limits<double>::infinity();
    for (float v : row) hi = std::max(hi, double(v));
    double z = 0.0;
    for (float v : row) z += std::exp(double(v) - hi);
    return double(row[static_cast<std::size_t>(target)]) - hi - std::log(z);
}

void check_length(const TransformerModel& model, std::size_t length) {
    const std::size_t limit = model.config().max_seq_len;
    if (length > limit) {
        fail(ErrorKind::sequence_length,
             "sequence of " + std::to_string(length) + " tokens exceeds max_seq_len " + std::to_string(limit));
    }
}

}  // namespace

double score_tokens(const TransformerModel& model, std::span<const int> tokens, std::size_t pad_to,
                    std::size_t batch_size) {
    if (tokens.empty()) return 0.0;
    const bool encoder = model.config().is_encoder();
    const std::size_t n = tokens.size();
    const std::size_t length = encoder ? n + 2 : n + 1;
    check_length(model, length);
    const std::size_t T = std::max(length, pad_to);
    check_length(model, T);

    std::vector<int> seq(T, kPadId);
    std::vector<std::uint8_t> attn(T, 0);
    seq[0] = kBosId;
    std::copy(tokens.begin(), tokens.end(), seq.begin() + 1);
    if (encoder) seq[n + 1] = kEosId;
    std::fill(attn.begin(), attn.begin() + long(length), 1);

    NoGradScope no_grad;
    Rng unused(0);
    const std::size_t d = model.config().hidden_size();
    const std::size_t V = model.config().vocab_size;
    double total = 0.0;

    if (!encoder) {
        Tensor hidden = model.hidden_states(seq, attn, 1, T, false, unused);
        std::vector<int> rows(n);
        for (std::size_t i = 0; i < n; ++i) rows[i] = int(i);
        Tensor logits = model.lm_logits(embedding(reshape(hidden, {T, d}), rows, {n}));
        for (std::size_t i = 0; i < n; ++i) total += log_prob(logits.data().subspan(i * V, V), tokens[i]);
        return total;
    }

    if (batch_size == 0) batch_size = 1;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t b = std::min(batch_size, n - start);
        std::vector<int> ids;
        std::vector<std::uint8_t> mask;
        std::vector<int> rows(b);
        for (std::size_t r = 0; r < b; ++r) {
            const std::size_t pos = start + r + 1;
            ids.insert(ids.end(), seq.begin(), seq.end());
            ids[r * T + pos] = kMaskId;
            mask.insert(mask.end(), attn.begin(), attn.end());
            rows[r] = int(r * T + pos);
        }
        Tensor hidden = model.hidden_states(ids, mask, b, T, false, unused);
        Tensor logits = model.lm_logits(embedding(reshape(hidden, {b * T, d}), rows, {b}));
        for (std::size_t r = 0; r < b; ++r) total += log_prob(logits.data().subspan(r * V, V), tokens[start + r]);
    }
    return total;
}

double score_sentence(const TransformerModel& model, const Tokenizer& tokenizer, std::string_view text,
                      bool length_normalize) {
    const auto ids = tokenizer.encode(text);
    const double total = score_tokens(model, ids);
    return length_normalize && !ids.empty() ? total / double(ids.size()) : total;
}

std::vector<MinimalPair> load_minimal_pairs(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    std::vector<MinimalPair> pairs;
    std::size_t line_no = 0;
    for (const auto& line : split(text, '\n')) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto where = path.string() + ":" + std::to_string(line_no);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::data, where + ": " + e.what());
        }
        auto field = [&](const char* key) -> std::string {
            auto it = j.find(key);
            return it != j.end() && it->is_string() ? it->get<std::string>() : std::string();
        };
        MinimalPair p{field("sentence_good"), field("sentence_bad"), field("phenomenon"), field("UID")};
        if (p.sentence_good.empty() || p.sentence_bad.empty()) {
            fail(ErrorKind::data, where + ": missing sentence_good or sentence_bad");
        }
        if (p.phenomenon.empty()) p.phenomenon = field("linguistics_term");
        if (p.phenomenon.empty()) p.phenomenon = "all";
        pairs.push_back(std::move(p));
    }
    if (pairs.empty()) fail(ErrorKind::data, "no minimal pairs in " + path.string());
    return pairs;
}

PairAccuracy minimal_pair_accuracy(std::span<const MinimalPair> pairs, const SentenceScorer& scorer) {
    if (pairs.empty()) fail(ErrorKind::data, "no minimal pairs to evaluate");
    std::map<std::string, GroupAccuracy> groups;
    PairAccuracy acc;
    for (const auto& p : pairs) {
        const bool correct = scorer(p.sentence_good) > scorer(p.sentence_bad);
        auto& g = groups[p.phenomenon];
        g.phenomenon = p.phenomenon;
        ++g.total;
        ++acc.total;
        if (correct) {
            ++g.correct;
            ++acc.correct;
        }
    }
    for (auto& [_, g] : groups) acc.groups.push_back(g);
    return acc;
}

std::string PairAccuracy::to_tsv(const std::string& model_name) const {
    auto pct = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
        return std::string(buf);
    };
    std::string header = "Model";
    std::string row = model_name;
    for (const auto& g : groups) {
        header += "\t" + g.phenomenon;
        row += "\t" + pct(g.accuracy());
    }
    return header + "\tOverall\n" + row + "\t" + pct(overall()) + "\n";
}

// ---------------------------------------------------------------------------
// metrics

double mcc(const ConfusionCounts& c) noexcept {
    const double tp = double(c.tp), tn = double(c.tn), fp = double(c.fp), fn = double(c.fn);
    const double a = tp + fp, b = tp + fn, d = tn + fp, e = tn + fn;
    if (a == 0 || b == 0 || d == 0 || e == 0) return 0.0;
    const double r = (tp * tn - fp * fn) / (std::sqrt(a) * std::sqrt(b) * std::sqrt(d) * std::sqrt(e));
    return std::clamp(r, -1.0, 1.0);
}

ConfusionCounts confusion(std::span<const int> predictions, std::span<const int> labels, int positive) {
    if (predictions.size() != labels.size()) {
        fail(ErrorKind::dimension, std::to_string(predictions.size()) + " predictions for " +
                                       std::to_string(labels.size()) + " labels");
    }
    ConfusionCounts c;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const bool p = predictions[i] == positive, y = labels[i] == positive;
        if (p && y) ++c.tp;
        else if (p) ++c.fp;
        else if (y) ++c.fn;
        else ++c.tn;
    }
    return c;
}

ClassificationMetrics classification_metrics(std::span<const int> predictions, std::span<const int> labels,
                                             int positive) {
    const auto c = confusion(predictions, labels, positive);
    if (labels.empty()) fail(ErrorKind::data, "no predictions to score");
    ClassificationMetrics m;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
    m.accuracy = double(hits) / double(labels.size());
    const double precision = c.tp + c.fp ? double(c.tp) / double(c.tp + c.fp) : 0.0;
    const double recall = c.tp + c.fn ? double(c.tp) / double(c.tp + c.fn) : 0.0;
    m.f1 = precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    m.mcc = mcc(c);
    return m;
}

// ---------------------------------------------------------------------------
// fine-tuning

std::vector<ClassificationExample> load_classification_tsv(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    std::vector<ClassificationExample> out;
    std::size_t line_no = 0;
    for (auto line : split(text, '\n')) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        auto fields = split(line, '\t');
        const auto where = path.string() + ":" + std::to_string(line_no);
        if (fields.size() < 2 || fields.size() > 3) {
            fail(ErrorKind::data, where + ": expected 2 or 3 tab-separated fields, got " + std::to_string(fields.size()));
        }
        const std::string label_text = trim(fields.back());
        int label = 0;
        auto [ptr, ec] = std::from_chars(label_text.data(), label_text.data() + label_text.size(), label);
        if (ec != std::errc() || ptr != label_text.data() + label_text.size()) {
            if (out.empty() && line_no == 1) continue;  // header
            fail(ErrorKind::data, where + ": label '" + label_text + "' is not an integer");
        }
        if (label < 0) fail(ErrorKind::data, where + ": negative label");
        ClassificationExample ex;
        ex.text_a = fields[0];
        if (fields.size() == 3) ex.text_b = fields[1];
        ex.label = label;
        out.push_back(std::move(ex));
    }
    if (out.empty()) fail(ErrorKind::data, "no examples in " + path.string());
    return out;
}

FinetuneConfig FinetuneConfig::encoder_preset() {
    return FinetuneConfig{};
}

FinetuneConfig FinetuneConfig::decoder_preset() {
    FinetuneConfig c;
    c.learning_rate = 1e-4;
    c.epochs = 5;
    return c;
}

void FinetuneConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) fail(ErrorKind::config, "learning_rate must be >= 0");
    if (batch_size == 0) fail(ErrorKind::config, "batch_size must be positive");
    if (!(weight_decay >= 0.0)) fail(ErrorKind::config, "weight_decay must be >= 0");
}

namespace {

std::vector<int> encode_example(const Tokenizer& tok, const ClassificationExample& ex, std::size_t limit) {
    std::vector<int> ids{kBosId};
    for (int id : tok.encode(ex.text_a)) ids.push_back(id);
    ids.push_back(kEosId);
    if (!ex.text_b.empty()) {
        for (int id : tok.encode(ex.text_b)) ids.push_back(id);
        ids.push_back(kEosId);
    }
    if (ids.size() > limit) {
        ids.resize(limit - 1);
        ids.push_back(kEosId);
    }
    return ids;
}

Tensor head_param(std::size_t rows, std::size_t cols, Rng& rng) {
    std::vector<float> v(rows * cols);
    for (auto& x : v) x = static_cast<float>(rng.normal(0.0, 0.02));
    return Tensor::parameter({rows, cols}, std::move(v));
}

}  // namespace

SequenceClassifier SequenceClassifier::init(const TransformerModel& backbone, std::size_t num_labels, std::uint64_t seed) {
    if (num_labels < 2) fail(ErrorKind::config, "a classifier needs at least 2 labels");
    SequenceClassifier c;
    c.backbone_ = backbone;
    c.num_labels_ = num_labels;
    const std::size_t d = backbone.config().hidden_size();
    Rng rng = Rng::derive(seed, 0x68656164ULL);
    if (backbone.config().is_encoder()) {
        c.dense_w_ = head_param(d, d, rng);
        c.dense_b_ = Tensor::parameter({d}, std::vector<float>(d, 0.0f));
    }
    c.out_w_ = head_param(d, num_labels, rng);
    c.out_b_ = Tensor::parameter({num_labels}, std::vector<float>(num_labels, 0.0f));
    return c;
}

std::vector<Tensor*> SequenceClassifier::trainable() {
    std::vector<Tensor*> out;
    for (auto& p : backbone_.parameters()) out.push_back(&p.tensor);
    if (dense_w_.defined()) {
        out.push_back(&dense_w_);
        out.push_back(&dense_b_);
    }
    out.push_back(&out_w_);
    out.push_back(&out_b_);
    return out;
}

Tensor SequenceClassifier::logits(const Tokenizer& tokenizer, std::span<const ClassificationExample> batch, bool training,
                                  Rng& rng) const {
    const auto& cfg = backbone_.config();
    std::vector<std::vector<int>> encoded;
    std::size_t T = 0;
    for (const auto& ex : batch) {
        encoded.push_back(encode_example(tokenizer, ex, cfg.max_seq_len));
        T = std::max(T, encoded.back().size());
    }
    const std::size_t N = batch.size(), d = cfg.hidden_size();
    std::vector<int> ids(N * T, kPadId);
    std::vector<std::uint8_t> mask(N * T, 0);
    std::vector<int> rows(N);
    for (std::size_t r = 0; r < N; ++r) {
        std::copy(encoded[r].begin(), encoded[r].end(), ids.begin() + long(r * T));
        std::fill_n(mask.begin() + long(r * T), encoded[r].size(), 1);
        rows[r] = int(r * T + (cfg.is_encoder() ? 0 : encoded[r].size() - 1));
    }
    Tensor hidden = backbone_.hidden_states(ids, mask, N, T, training, rng);
    Tensor pooled = embedding(reshape(hidden, {N * T, d}), rows, {N});
    if (dense_w_.defined()) {
        pooled = dropout(pooled, cfg.dropout, training, rng);
        pooled = tinylm::tanh(add_bias(matmul(pooled, dense_w_), dense_b_));
    }
    pooled = dropout(pooled, cfg.dropout, training, rng);
    return add_bias(matmul(pooled, out_w_), out_b_);
}

std::vector<int> SequenceClassifier::predict(const Tokenizer& tokenizer, std::span<const ClassificationExample> examples,
                                             std::size_t batch_size) const {
    NoGradScope no_grad;
    Rng unused(0);
    std::vector<int> out;
    if (batch_size == 0) batch_size = 1;
    for (std::size_t start = 0; start < examples.size(); start += batch_size) {
        const auto chunk = examples.subspan(start, std::min(batch_size, examples.size() - start));
        Tensor z = logits(tokenizer, chunk, false, unused);
        for (std::size_t r = 0; r < chunk.size(); ++r) {
            const auto row = z.data().subspan(r * num_labels_, num_labels_);
            out.push_back(int(std::max_element(row.begin(), row.end()) - row.begin()));
        }
    }
    return out;
}

FinetuneResult finetune_classifier(const TransformerModel& pretrained, const Tokenizer& tokenizer,
                                   std::span<const ClassificationExample> train_examples,
                                   std::span<const ClassificationExample> eval_examples, const FinetuneConfig& config) {
    config.validate();
    if (train_examples.empty()) fail(ErrorKind::data, "no training examples");
    int max_label = 1;
    for (const auto* set : {&train_examples, &eval_examples}) {
        for (const auto& ex : *set) {
            if (ex.label < 0) fail(ErrorKind::data, "negative label");
            max_label = std::max(max_label, ex.label);
        }
    }
    const std::size_t arity = std::size_t(max_label) + 1;

    FinetuneResult result{SequenceClassifier::init(pretrained.clone(), arity, config.seed), {}, {}};
    auto& clf = result.classifier;

    std::vector<float> weights;
    if (config.class_weighted) {
        std::vector<std::size_t> counts(arity, 0);
        for (const auto& ex : train_examples) ++counts[std::size_t(ex.label)];
        for (std::size_t c = 0; c < arity; ++c) {
            weights.push_back(counts[c] ? float(double(train_examples.size()) / double(arity * counts[c])) : 1.0f);
        }
    }

    auto params = clf.trainable();
    std::vector<AdamState> state(params.size());
    TrainConfig adam;
    const std::size_t per_epoch = (train_examples.size() + config.batch_size - 1) / config.batch_size;
    const std::size_t total = per_epoch * config.epochs;
    Rng dropout_rng = Rng::derive(config.seed, 0x64726f70ULL);
    std::size_t step = 0;

    std::vector<std::size_t> order(train_examples.size());
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle = Rng::derive(config.seed, 0x4654ULL + epoch);
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[std::size_t(shuffle.uniform_int(0, std::int64_t(i) - 1))]);
        }
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            std::vector<ClassificationExample> batch;
            std::vector<int> labels;
            for (std::size_t k = start; k < std::min(order.size(), start + config.batch_size); ++k) {
                batch.push_back(train_examples[order[k]]);
                labels.push_back(batch.back().label);
            }
            Tape tape;
            TapeScope scope(tape);
            CrossEntropyOptions opt;
            opt.class_weights = weights;
            Tensor loss = cross_entropy(clf.logits(tokenizer, batch, true, dropout_rng), labels, opt);
            tape.backward(loss);
            loss_sum += double(loss.item());

            for (auto* p : params) {
                if (!p->has_grad()) continue;
                for (float g : p->grad()) {
                    if (!std::isfinite(g)) fail(ErrorKind::numeric, "non-finite gradient during fine-tuning");
                }
            }
            ++step;
            const double lr = scheduled_lr(step, total, 0, config.learning_rate);
            for (std::size_t i = 0; i < params.size(); ++i) {
                auto& t = *params[i];
                adamw_step(t.mutable_data(), t.grad(), state[i], step, lr, t.rank() >= 2 ? config.weight_decay : 0.0, adam);
                t.zero_grad();
            }
        }
        result.epoch_losses.push_back(loss_sum / double(per_epoch));
    }

    if (!eval_examples.empty()) {
        const auto preds = clf.predict(tokenizer, eval_examples, config.batch_size);
        std::vector<int> gold;
        for (const auto& ex : eval_examples) gold.push_back(ex.label);
        result.metrics = classification_metrics(preds, gold);
    }
    return result;
}

}  // namespace tinylm
