#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tinylm/kvfile.hpp"
#include "tinylm/ops.hpp"
#include "tinylm/rng.hpp"
#include "tinylm/tensor.hpp"

namespace tinylm {

enum class Objective { mlm, clm };
enum class PositionType { absolute, relative_key, relative_key_query };

Objective parse_objective(std::string_view name);
std::string_view to_string(Objective objective) noexcept;
PositionType parse_position_type(std::string_view name);
std::string_view to_string(PositionType type) noexcept;

struct ModelConfig {
    Objective objective = Objective::mlm;
    std::size_t vocab_size = 8000;
    std::size_t max_seq_len = 128;
    std::size_t num_layers = 4;
    std::size_t num_heads = 8;
    std::size_t head_size = 70;
    std::size_t ffn_size = 1412;
    Activation activation = Activation::gelu_new;
    float dropout = 0.15f;
    float attention_dropout = 0.3f;
    PositionType pos_type = PositionType::relative_key_query;
    bool tie_lm_head = true;
    float layer_norm_eps = 1e-5f;

    std::size_t hidden_size() const noexcept { return num_heads * head_size; }
    bool is_encoder() const noexcept { return objective == Objective::mlm; }

    // Throws a config error naming the offending field.
    void validate() const;

    // Reads known keys from kv (missing keys keep their defaults).
    void read(KeyValueFile& kv);
    std::string to_text() const;
    static ModelConfig load(const std::filesystem::path& path);
};

// Encoder with masked-LM head: 4 layers, 8 heads of 70, FFN 1412, 8K vocab.
ModelConfig bebeshka_config();
// Decoder with causal-LM head: 6 layers, 12 heads of 64, FFN 3072, 30K vocab.
ModelConfig zlata_config();

struct ParameterSpec {
    std::string name;
    Shape shape;
};

// Names and shapes of every parameter, in checkpoint order.
std::vector<ParameterSpec> parameter_manifest(const ModelConfig& config);
std::size_t param_count(const ModelConfig& config);

// Scores [..., A, T, T] from queries and keys [..., A, T, H]. `relative` is the
// [2*max_len-1, H] distance table (ignored for absolute). Relative terms are
// added unscaled on top of q.k / sqrt(H).
Tensor attention_scores(const Tensor& q, const Tensor& k, const Tensor& relative, PositionType type,
                        std::size_t max_len);

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

class TransformerModel {
public:
    TransformerModel() = default;

    static TransformerModel init(const ModelConfig& config, std::uint64_t seed);
    // Copy with its own parameter storage (plain copies share tensors).
    TransformerModel clone() const;

    // Final hidden states [B, T, d]. `attention_mask` holds 1 for real tokens
    // and 0 for padding; an empty span means no padding.
    Tensor hidden_states(std::span<const int> ids, std::span<const std::uint8_t> attention_mask,
                         std::size_t batch, std::size_t seq_len, bool training, Rng& rng) const;
    // Vocabulary logits for hidden rows [..., d] -> [..., V].
    Tensor lm_logits(const Tensor& hidden) const;
    // [B, T, V]
    Tensor forward(std::span<const int> ids, std::span<const std::uint8_t> attention_mask,
                   std::size_t batch, std::size_t seq_len, bool training, Rng& rng) const;

    const ModelConfig& config() const noexcept { return config_; }
    const std::vector<NamedTensor>& parameters() const noexcept { return params_; }
    std::vector<NamedTensor>& parameters() noexcept { return params_; }
    const Tensor& parameter(std::string_view name) const;
    std::size_t num_parameters() const noexcept;
    bool all_finite() const;

    static constexpr const char* kConfigFile = "config.txt";
    static constexpr const char* kManifestFile = "manifest.txt";
    static constexpr const char* kWeightsFile = "weights.bin";

    void save(const std::filesystem::path& dir) const;
    static TransformerModel load(const std::filesystem::path& dir);

private:
    struct Layer {
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor relative;
        Tensor w_in, b_in, w_out, b_out;
        Tensor norm1_g, norm1_b, norm2_g, norm2_b;
    };

    void bind();
    Tensor attention(const Layer& layer, const Tensor& x, std::span<const std::uint8_t> mask, std::size_t batch,
                     std::size_t seq_len, bool training, Rng& rng) const;
    Tensor feed_forward(const Layer& layer, const Tensor& x) const;

    ModelConfig config_;
    std::vector<NamedTensor> params_;
    Tensor token_emb_, position_emb_, emb_norm_g_, emb_norm_b_, final_norm_g_, final_norm_b_, head_w_, head_b_;
    std::vector<Layer> layers_;
};

}  // namespace tinylm
