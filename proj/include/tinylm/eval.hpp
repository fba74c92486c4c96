#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tinylm/model.hpp"
#include "tinylm/tokenizer.hpp"

namespace tinylm {

// ---------------------------------------------------------------------------
// zero-shot scoring

// Log-likelihood of a token sequence (no specials). Causal models score
// [bos] + tokens left to right; masked models sum the pseudo-log-likelihood of
// [bos] + tokens + [eos] with one masked position per forward pass. `pad_to`
// appends padding (masked out) up to that length; it must not change scores.
double score_tokens(const TransformerModel& model, std::span<const int> tokens, std::size_t pad_to = 0,
                    std::size_t batch_size = 64);
// Raw sum by default; `length_normalize` divides by the number of scored tokens.
double score_sentence(const TransformerModel& model, const Tokenizer& tokenizer, std::string_view text,
                      bool length_normalize = false);

struct MinimalPair {
    std::string sentence_good;
    std::string sentence_bad;
    std::string phenomenon;
    std::string paradigm;
};

// JSON-lines with sentence_good, sentence_bad and phenomenon (falls back to
// linguistics_term, then "all"); paradigm falls back to UID.
std::vector<MinimalPair> load_minimal_pairs(const std::filesystem::path& path);

struct GroupAccuracy {
    std::string phenomenon;
    std::size_t correct = 0;
    std::size_t total = 0;
    double accuracy() const noexcept { return total ? double(correct) / double(total) : 0.0; }
};

struct PairAccuracy {
    std::vector<GroupAccuracy> groups;  // sorted by phenomenon
    std::size_t correct = 0;
    std::size_t total = 0;
    double overall() const noexcept { return total ? double(correct) / double(total) : 0.0; }

    // One header row of phenomena and one row for `model_name`, in percent.
    std::string to_tsv(const std::string& model_name) const;
};

using SentenceScorer = std::function<double(const std::string&)>;

// A pair counts as correct only when score(good) > score(bad).
PairAccuracy minimal_pair_accuracy(std::span<const MinimalPair> pairs, const SentenceScorer& scorer);

// ---------------------------------------------------------------------------
// metrics

struct ConfusionCounts {
    std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;
};

// Matthews correlation; 0 whenever a denominator factor is 0.
double mcc(const ConfusionCounts& c) noexcept;

struct ClassificationMetrics {
    double accuracy = 0.0;
    double f1 = 0.0;
    double mcc = 0.0;
};

// F1 and MCC treat `positive` as the positive class (one-vs-rest).
ClassificationMetrics classification_metrics(std::span<const int> predictions, std::span<const int> labels,
                                             int positive = 1);
ConfusionCounts confusion(std::span<const int> predictions, std::span<const int> labels, int positive = 1);

// ---------------------------------------------------------------------------
// fine-tuning

struct ClassificationExample {
    std::string text_a;
    std::string text_b;  // empty for single-sentence tasks
    int label = 0;
};

// Tab-separated: text_a [TAB text_b] TAB label. A first line whose label
// field is not an integer is taken as a header.
std::vector<ClassificationExample> load_classification_tsv(const std::filesystem::path& path);

struct FinetuneConfig {
    double learning_rate = 5e-5;
    std::size_t batch_size = 64;
    std::size_t epochs = 10;
    double weight_decay = 0.01;
    bool class_weighted = false;
    std::uint64_t seed = 0;

    static FinetuneConfig encoder_preset();
    static FinetuneConfig decoder_preset();
    void validate() const;
};

class SequenceClassifier {
public:
    static SequenceClassifier init(const TransformerModel& backbone, std::size_t num_labels, std::uint64_t seed);

    // [N, num_labels]
    Tensor logits(const Tokenizer& tokenizer, std::span<const ClassificationExample> batch, bool training, Rng& rng) const;
    std::vector<int> predict(const Tokenizer& tokenizer, std::span<const ClassificationExample> examples,
                             std::size_t batch_size = 64) const;

    std::size_t num_labels() const noexcept { return num_labels_; }
    TransformerModel& backbone() noexcept { return backbone_; }
    const TransformerModel& backbone() const noexcept { return backbone_; }
    std::vector<Tensor*> trainable();

private:
    TransformerModel backbone_;
    std::size_t num_labels_ = 0;
    Tensor dense_w_, dense_b_;  // encoder only
    Tensor out_w_, out_b_;
};

struct FinetuneResult {
    SequenceClassifier classifier;
    std::vector<double> epoch_losses;
    ClassificationMetrics metrics;  // on the evaluation examples
};

// Copies `pretrained`, attaches a head and trains end to end.
FinetuneResult finetune_classifier(const TransformerModel& pretrained, const Tokenizer& tokenizer,
                                   std::span<const ClassificationExample> train_examples,
                                   std::span<const ClassificationExample> eval_examples, const FinetuneConfig& config);

}  // namespace tinylm
