#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tinylm/kvfile.hpp"
#include "tinylm/model.hpp"
#include "tinylm/rng.hpp"
#include "tinylm/tokenizer.hpp"

namespace tinylm {

struct MaskingPolicy {
    double select_prob = 0.135;
    double mask_frac = 8.0 / 9.0;
    double random_frac = 1.0 / 9.0;
    double keep_frac = 0.0;

    void validate() const;
};

struct MaskedSequence {
    std::vector<int> inputs;
    std::vector<int> labels;  // kIgnoreIndex where not selected
};

// Special ids (pad, unk, bos, eos, mask) are never selected. Random
// replacements are drawn uniformly from the non-special ids below vocab_size.
MaskedSequence apply_mlm_masking(std::span<const int> ids, const MaskingPolicy& policy, std::size_t vocab_size,
                                 Rng& rng);

struct ShiftedSequence {
    std::vector<int> inputs;
    std::vector<int> labels;
};

// inputs = ids[0..n-2], labels = ids[1..n-1] with pad labels ignored.
ShiftedSequence clm_shift(std::span<const int> ids);

// Fixed-length windows over the concatenated documents.
struct PackedDataset {
    std::size_t window = 0;
    std::vector<int> ids;  // num_windows * window

    std::size_t size() const noexcept { return window ? ids.size() / window : 0; }
    std::span<const int> at(std::size_t i) const { return std::span<const int>(ids).subspan(i * window, window); }
};

// Documents joined with one eos between neighbours; the last window is padded.
PackedDataset pack_corpus(const std::vector<std::vector<int>>& documents, std::size_t window);

// One document per non-blank line, each as [bos] + encode(line).
std::vector<std::vector<int>> tokenize_documents(const Tokenizer& tokenizer, std::span<const std::string> lines);

struct TrainConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    std::size_t epochs = 10;
    std::size_t batch_size = 1;
    std::size_t grad_accum = 64;
    double warmup_fraction = 0.06;
    std::uint64_t seed = 0;
    std::uint64_t eval_seed = 12345;
    std::size_t eval_batch_size = 16;
    std::filesystem::path checkpoint_dir;  // empty: no checkpoints
    std::filesystem::path metrics_path;    // empty: metrics kept in memory only

    void validate() const;
    void read(KeyValueFile& kv);
    std::string to_text() const;
};

struct AdamState {
    std::vector<float> m;
    std::vector<float> v;
};

// One decoupled-decay AdamW update of a single tensor; `step` is 1-based.
// Throws a numeric error, leaving p untouched, if any gradient is not finite.
void adamw_step(std::span<float> params, std::span<const float> grads, AdamState& state, std::size_t step, double lr,
                double weight_decay, const TrainConfig& config);

// Linear warmup to `peak` over warmup_steps, then linear decay reaching 0 at
// total_steps. `step` is 1-based.
double scheduled_lr(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double peak);

struct PerplexityResult {
    double loss = 0.0;
    double perplexity = 1.0;
    std::size_t tokens = 0;
};

// Mean cross-entropy over supervised positions: masked positions (fixed seed)
// for encoders, next-token positions for decoders.
PerplexityResult evaluate_perplexity(const TransformerModel& model, const PackedDataset& data,
                                     const MaskingPolicy& policy, std::uint64_t eval_seed, std::size_t batch_size = 16);

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double perplexity = 0.0;
    double wall_time = 0.0;
};

class MetricsLog {
public:
    void append(const EpochRecord& record);
    const std::vector<EpochRecord>& records() const noexcept { return records_; }
    bool empty() const noexcept { return records_.empty(); }
    static std::string to_json_line(const EpochRecord& record);
    std::string to_jsonl() const;
    static MetricsLog load(const std::filesystem::path& path);

private:
    std::vector<EpochRecord> records_;
};

// Step-level driver; train() is a loop over it.
class Trainer {
public:
    Trainer(TransformerModel& model, const TrainConfig& config, const MaskingPolicy& policy, std::size_t total_steps);

    // Forward/backward over the given windows, split into micro-batches of
    // config.batch_size. Gradients accumulate in the model parameters; the
    // loss is normalised by the supervised count of the whole group.
    // Returns the mean loss of the group (0 when nothing is supervised).
    double accumulate(const PackedDataset& data, std::span<const std::size_t> windows, std::size_t epoch);
    std::size_t last_supervised() const noexcept { return last_supervised_; }

    // AdamW update at the scheduled learning rate, then clears gradients.
    void apply_step();
    void zero_grad();
    std::size_t step() const noexcept { return step_; }
    std::size_t total_steps() const noexcept { return total_steps_; }
    std::size_t warmup_steps() const noexcept { return warmup_steps_; }

private:
    TransformerModel& model_;
    TrainConfig config_;
    MaskingPolicy policy_;
    std::vector<AdamState> state_;
    std::size_t step_ = 0;
    std::size_t total_steps_;
    std::size_t warmup_steps_;
    std::size_t last_supervised_ = 0;
    Rng dropout_rng_;
};

// Called after each epoch; returning false stops training.
using EpochCallback = std::function<bool(const EpochRecord&, const TransformerModel&)>;

MetricsLog train(TransformerModel& model, const PackedDataset& train_data, const PackedDataset& val_data,
                 const TrainConfig& config, const MaskingPolicy& policy, const EpochCallback& on_epoch = {});

}  // namespace tinylm
