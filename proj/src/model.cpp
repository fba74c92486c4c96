#include "tinylm/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "tinylm/error.hpp"
#include "tinylm/tokenizer.hpp"

namespace tinylm {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

Objective parse_objective(std::string_view name) {
    if (name == "mlm" || name == "MLM") return Objective::mlm;
    if (name == "clm" || name == "CLM") return Objective::clm;
    fail(ErrorKind::config, "objective must be mlm or clm, got '" + std::string(name) + "'");
}

std::string_view to_string(Objective objective) noexcept {
    return objective == Objective::mlm ? "mlm" : "clm";
}

PositionType parse_position_type(std::string_view name) {
    if (name == "absolute") return PositionType::absolute;
    if (name == "relative_key") return PositionType::relative_key;
    if (name == "relative_key_query") return PositionType::relative_key_query;
    fail(ErrorKind::config,
         "pos_type must be absolute, relative_key or relative_key_query, got '" + std::string(name) + "'");
}

std::string_view to_string(PositionType type) noexcept {
    switch (type) {
        case PositionType::absolute: return "absolute";
        case PositionType::relative_key: return "relative_key";
        case PositionType::relative_key_query: return "relative_key_query";
    }
    return "absolute";
}

// ---------------------------------------------------------------------------
// configuration

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* field) {
        if (v < 1) fail(ErrorKind::config, std::string(field) + " must be >= 1");
    };
    positive(vocab_size, "vocab_size");
    positive(max_seq_len, "max_seq_len");
    positive(num_layers, "num_layers");
    positive(num_heads, "num_heads");
    positive(head_size, "head_size");
    positive(ffn_size, "ffn_size");
    auto probability = [](float p, const char* field) {
        if (!(p >= 0.0f && p < 1.0f)) fail(ErrorKind::config, std::string(field) + " must lie in [0, 1)");
    };
    probability(dropout, "dropout");
    probability(attention_dropout, "attention_dropout");
    if (!(layer_norm_eps > 0.0f)) fail(ErrorKind::config, "layer_norm_eps must be positive");
    if (objective == Objective::mlm && vocab_size <= static_cast<std::size_t>(kMaskId)) {
        fail(ErrorKind::config, "vocab_size must include the mask token (id " + std::to_string(kMaskId) + ") for mlm");
    }
}

void ModelConfig::read(KeyValueFile& kv) {
    if (auto v = kv.take("objective")) objective = parse_objective(*v);
    auto size = [&](const char* key, std::size_t& field) {
        const auto v = kv.take_int(key, static_cast<std::int64_t>(field));
        if (v < 0) fail(ErrorKind::config, std::string(key) + " must be non-negative");
        field = static_cast<std::size_t>(v);
    };
    size("vocab_size", vocab_size);
    size("max_seq_len", max_seq_len);
    size("num_layers", num_layers);
    size("num_heads", num_heads);
    size("head_size", head_size);
    size("ffn_size", ffn_size);
    if (auto v = kv.take("activation")) activation = parse_activation(*v);
    dropout = static_cast<float>(kv.take_double("dropout", dropout));
    attention_dropout = static_cast<float>(kv.take_double("attention_dropout", attention_dropout));
    if (auto v = kv.take("pos_type")) pos_type = parse_position_type(*v);
    tie_lm_head = kv.take_bool("tie_lm_head", tie_lm_head);
    layer_norm_eps = static_cast<float>(kv.take_double("layer_norm_eps", layer_norm_eps));
}

std::string ModelConfig::to_text() const {
    return format_key_values({
        {"objective", std::string(to_string(objective))},
        {"vocab_size", std::to_string(vocab_size)},
        {"max_seq_len", std::to_string(max_seq_len)},
        {"num_layers", std::to_string(num_layers)},
        {"num_heads", std::to_string(num_heads)},
        {"head_size", std::to_string(head_size)},
        {"ffn_size", std::to_string(ffn_size)},
        {"activation", std::string(to_string(activation))},
        {"dropout", format_float(dropout)},
        {"attention_dropout", format_float(attention_dropout)},
        {"pos_type", std::string(to_string(pos_type))},
        {"tie_lm_head", tie_lm_head ? "true" : "false"},
        {"layer_norm_eps", format_float(layer_norm_eps)},
    });
}

ModelConfig ModelConfig::load(const std::filesystem::path& path) {
    auto kv = KeyValueFile::load(path);
    ModelConfig c;
    c.read(kv);
    kv.finish();
    c.validate();
    return c;
}

ModelConfig bebeshka_config() {
    ModelConfig c;
    c.objective = Objective::mlm;
    c.vocab_size = 8000;
    c.max_seq_len = 128;
    c.num_layers = 4;
    c.num_heads = 8;
    c.head_size = 70;
    c.ffn_size = 1412;
    c.activation = Activation::gelu_new;
    c.dropout = 0.15f;
    c.attention_dropout = 0.3f;
    c.pos_type = PositionType::relative_key_query;
    c.tie_lm_head = true;
    return c;
}

ModelConfig zlata_config() {
    ModelConfig c;
    c.objective = Objective::clm;
    c.vocab_size = 30000;
    c.max_seq_len = 1024;
    c.num_layers = 6;
    c.num_heads = 12;
    c.head_size = 64;
    c.ffn_size = 3072;
    c.activation = Activation::gelu;
    c.dropout = 0.2f;
    c.attention_dropout = 0.2f;
    c.pos_type = PositionType::absolute;
    c.tie_lm_head = true;
    return c;
}

// ---------------------------------------------------------------------------
// manifest

std::vector<ParameterSpec> parameter_manifest(const ModelConfig& c) {
    const std::size_t d = c.hidden_size();
    std::vector<ParameterSpec> specs;
    specs.push_back({"embeddings.token", {c.vocab_size, d}});
    if (c.pos_type == PositionType::absolute) specs.push_back({"embeddings.position", {c.max_seq_len, d}});
    if (c.is_encoder()) {
        specs.push_back({"embeddings.norm.gamma", {d}});
        specs.push_back({"embeddings.norm.beta", {d}});
    }
    for (std::size_t i = 0; i < c.num_layers; ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        for (const char* proj : {"query", "key", "value", "output"}) {
            specs.push_back({p + "attention." + proj + ".weight", {d, d}});
            specs.push_back({p + "attention." + proj + ".bias", {d}});
        }
        if (c.pos_type != PositionType::absolute) {
            specs.push_back({p + "attention.relative", {2 * c.max_seq_len - 1, c.head_size}});
        }
        specs.push_back({p + "ffn.in.weight", {d, c.ffn_size}});
        specs.push_back({p + "ffn.in.bias", {c.ffn_size}});
        specs.push_back({p + "ffn.out.weight", {c.ffn_size, d}});
        specs.push_back({p + "ffn.out.bias", {d}});
        for (const char* norm : {"norm1", "norm2"}) {
            specs.push_back({p + norm + ".gamma", {d}});
            specs.push_back({p + norm + ".beta", {d}});
        }
    }
    if (!c.is_encoder()) {
        specs.push_back({"final_norm.gamma", {d}});
        specs.push_back({"final_norm.beta", {d}});
    }
    if (!c.tie_lm_head) specs.push_back({"lm_head.weight", {c.vocab_size, d}});
    specs.push_back({"lm_head.bias", {c.vocab_size}});
    return specs;
}

std::size_t param_count(const ModelConfig& config) {
    std::size_t n = 0;
    for (const auto& s : parameter_manifest(config)) n += shape_numel(s.shape);
    return n;
}

// ---------------------------------------------------------------------------
// attention scores

Tensor attention_scores(const Tensor& q, const Tensor& k, const Tensor& relative, PositionType type,
                        std::size_t max_len) {
    if (q.rank() < 2 || q.shape() != k.shape()) {
        fail(ErrorKind::dimension, "attention_scores: query " + shape_to_string(q.shape()) + " and key " +
                                       shape_to_string(k.shape()) + " must match");
    }
    const std::size_t T = q.size(-2);
    const std::size_t H = q.size(-1);
    if (T > max_len) {
        fail(ErrorKind::sequence_length,
             "sequence of " + std::to_string(T) + " tokens exceeds max_seq_len " + std::to_string(max_len));
    }
    Tensor scores = scale(matmul(q, transpose(k)), static_cast<float>(1.0 / std::sqrt(double(H))));
    if (type == PositionType::absolute) return scores;

    if (!relative.defined() || relative.shape() != Shape{2 * max_len - 1, H}) {
        fail(ErrorKind::dimension, "relative table must have shape " + shape_to_string({2 * max_len - 1, H}));
    }
    // Distance j - i maps to table row (j - i) + max_len - 1; only the 2T-1
    // rows reachable at this length are used.
    const Tensor window_t = transpose(slice_rows(relative, max_len - T, 2 * T - 1));
    std::vector<std::size_t> query_rows(T * T), key_rows(T * T), distance(T * T);
    for (std::size_t i = 0; i < T; ++i) {
        for (std::size_t j = 0; j < T; ++j) {
            query_rows[i * T + j] = i;
            key_rows[i * T + j] = j;
            distance[i * T + j] = j + T - 1 - i;
        }
    }
    scores = add(scores, gather2d(matmul(q, window_t), query_rows, distance, T, T));
    if (type == PositionType::relative_key_query) {
        scores = add(scores, gather2d(matmul(k, window_t), key_rows, distance, T, T));
    }
    return scores;
}

// ---------------------------------------------------------------------------
// model

TransformerModel TransformerModel::init(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    TransformerModel m;
    m.config_ = config;
    Rng rng(seed);
    for (const auto& spec : parameter_manifest(config)) {
        std::vector<float> values(shape_numel(spec.shape));
        const bool is_gain = spec.name.ends_with(".gamma");
        const bool is_zero = spec.name.ends_with(".bias") || spec.name.ends_with(".beta");
        for (auto& v : values) {
            v = is_gain ? 1.0f : is_zero ? 0.0f : static_cast<float>(rng.normal(0.0, 0.02));
        }
        m.params_.push_back({spec.name, Tensor::parameter(spec.shape, std::move(values))});
    }
    m.bind();
    return m;
}

TransformerModel TransformerModel::clone() const {
    TransformerModel m;
    m.config_ = config_;
    for (const auto& p : params_) {
        const auto values = p.tensor.data();
        m.params_.push_back({p.name, Tensor::parameter(p.tensor.shape(), std::vector<float>(values.begin(), values.end()))});
    }
    m.bind();
    return m;
}

const Tensor& TransformerModel::parameter(std::string_view name) const {
    for (const auto& p : params_) {
        if (p.name == name) return p.tensor;
    }
    fail(ErrorKind::config, "no parameter named '" + std::string(name) + "'");
}

void TransformerModel::bind() {
    auto get = [&](const std::string& name) { return parameter(name); };
    auto maybe = [&](const std::string& name) {
        for (const auto& p : params_) {
            if (p.name == name) return p.tensor;
        }
        return Tensor();
    };
    token_emb_ = get("embeddings.token");
    position_emb_ = maybe("embeddings.position");
    emb_norm_g_ = maybe("embeddings.norm.gamma");
    emb_norm_b_ = maybe("embeddings.norm.beta");
    final_norm_g_ = maybe("final_norm.gamma");
    final_norm_b_ = maybe("final_norm.beta");
    head_w_ = config_.tie_lm_head ? token_emb_ : get("lm_head.weight");
    head_b_ = get("lm_head.bias");
    layers_.clear();
    for (std::size_t i = 0; i < config_.num_layers; ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        Layer l;
        l.wq = get(p + "attention.query.weight");
        l.bq = get(p + "attention.query.bias");
        l.wk = get(p + "attention.key.weight");
        l.bk = get(p + "attention.key.bias");
        l.wv = get(p + "attention.value.weight");
        l.bv = get(p + "attention.value.bias");
        l.wo = get(p + "attention.output.weight");
        l.bo = get(p + "attention.output.bias");
        l.relative = maybe(p + "attention.relative");
        l.w_in = get(p + "ffn.in.weight");
        l.b_in = get(p + "ffn.in.bias");
        l.w_out = get(p + "ffn.out.weight");
        l.b_out = get(p + "ffn.out.bias");
        l.norm1_g = get(p + "norm1.gamma");
        l.norm1_b = get(p + "norm1.beta");
        l.norm2_g = get(p + "norm2.gamma");
        l.norm2_b = get(p + "norm2.beta");
        layers_.push_back(std::move(l));
    }
}

std::size_t TransformerModel::num_parameters() const noexcept {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
}

bool TransformerModel::all_finite() const {
    for (const auto& p : params_) {
        for (float v : p.tensor.data()) {
            if (!std::isfinite(v)) return false;
        }
    }
    return true;
}

Tensor TransformerModel::attention(const Layer& layer, const Tensor& x, std::span<const std::uint8_t> mask,
                                   std::size_t batch, std::size_t seq_len, bool training, Rng& rng) const {
    const std::size_t A = config_.num_heads, H = config_.head_size;
    auto heads = [&](const Tensor& w, const Tensor& b) {
        return permute(reshape(add_bias(matmul(x, w), b), {batch, seq_len, A, H}), {0, 2, 1, 3});
    };
    const Tensor q = heads(layer.wq, layer.bq);
    const Tensor k = heads(layer.wk, layer.bk);
    const Tensor v = heads(layer.wv, layer.bv);
    Tensor scores = attention_scores(q, k, layer.relative, config_.pos_type, config_.max_seq_len);
    if (!mask.empty()) scores = masked_fill(scores, mask, {batch, 1, seq_len, seq_len}, -1e9f);
    Tensor probs = dropout(softmax_rows(scores), config_.attention_dropout, training, rng);
    Tensor context = reshape(permute(matmul(probs, v), {0, 2, 1, 3}), {batch, seq_len, A * H});
    return add_bias(matmul(context, layer.wo), layer.bo);
}

Tensor TransformerModel::feed_forward(const Layer& layer, const Tensor& x) const {
    Tensor h = activation(add_bias(matmul(x, layer.w_in), layer.b_in), config_.activation);
    return add_bias(matmul(h, layer.w_out), layer.b_out);
}

Tensor TransformerModel::hidden_states(std::span<const int> ids, std::span<const std::uint8_t> attention_mask,
                                       std::size_t batch, std::size_t seq_len, bool training, Rng& rng) const {
    if (params_.empty()) fail(ErrorKind::config, "model is not initialised");
    if (batch == 0 || seq_len == 0 || ids.size() != batch * seq_len) {
        fail(ErrorKind::dimension, "ids hold " + std::to_string(ids.size()) + " values for batch " +
                                       std::to_string(batch) + " x length " + std::to_string(seq_len));
    }
    if (!attention_mask.empty() && attention_mask.size() != ids.size()) {
        fail(ErrorKind::dimension, "attention mask size " + std::to_string(attention_mask.size()) +
                                       " does not match ids size " + std::to_string(ids.size()));
    }
    if (seq_len > config_.max_seq_len) {
        fail(ErrorKind::sequence_length, "sequence of " + std::to_string(seq_len) + " tokens exceeds max_seq_len " +
                                             std::to_string(config_.max_seq_len));
    }
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
            fail(ErrorKind::data, "token id " + std::to_string(id) + " outside vocabulary of size " +
                                      std::to_string(config_.vocab_size));
        }
    }

    const std::size_t T = seq_len;
    // 1 marks a blocked (query, key) pair.
    std::vector<std::uint8_t> blocked;
    const bool has_padding =
        !attention_mask.empty() && std::any_of(attention_mask.begin(), attention_mask.end(), [](auto m) { return m == 0; });
    if (has_padding || !config_.is_encoder()) {
        blocked.assign(batch * T * T, 0);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t i = 0; i < T; ++i) {
                for (std::size_t j = 0; j < T; ++j) {
                    const bool pad = has_padding && attention_mask[b * T + j] == 0;
                    const bool future = !config_.is_encoder() && j > i;
                    blocked[(b * T + i) * T + j] = (pad || future) ? 1 : 0;
                }
            }
        }
    }

    Tensor x = embedding(token_emb_, ids, {batch, T});
    if (config_.pos_type == PositionType::absolute) {
        std::vector<int> positions(batch * T);
        for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % T);
        x = add(x, embedding(position_emb_, positions, {batch, T}));
    }
    if (config_.is_encoder()) x = layer_norm(x, emb_norm_g_, emb_norm_b_, config_.layer_norm_eps);
    x = dropout(x, config_.dropout, training, rng);

    const float eps = config_.layer_norm_eps;
    for (const auto& layer : layers_) {
        if (config_.is_encoder()) {
            Tensor a = dropout(attention(layer, x, blocked, batch, T, training, rng), config_.dropout, training, rng);
            x = layer_norm(add(x, a), layer.norm1_g, layer.norm1_b, eps);
            Tensor f = dropout(feed_forward(layer, x), config_.dropout, training, rng);
            x = layer_norm(add(x, f), layer.norm2_g, layer.norm2_b, eps);
        } else {
            Tensor a = attention(layer, layer_norm(x, layer.norm1_g, layer.norm1_b, eps), blocked, batch, T, training, rng);
            x = add(x, dropout(a, config_.dropout, training, rng));
            Tensor f = feed_forward(layer, layer_norm(x, layer.norm2_g, layer.norm2_b, eps));
            x = add(x, dropout(f, config_.dropout, training, rng));
        }
    }
    if (!config_.is_encoder()) x = layer_norm(x, final_norm_g_, final_norm_b_, eps);
    return x;
}

Tensor TransformerModel::lm_logits(const Tensor& hidden) const {
    return add_bias(matmul(hidden, transpose(head_w_)), head_b_);
}

Tensor TransformerModel::forward(std::span<const int> ids, std::span<const std::uint8_t> attention_mask,
                                 std::size_t batch, std::size_t seq_len, bool training, Rng& rng) const {
    return lm_logits(hidden_states(ids, attention_mask, batch, seq_len, training, rng));
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

std::string shape_field(const Shape& shape) {
    std::string s;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += 'x';
        s += std::to_string(shape[i]);
    }
    return s;
}

std::string manifest_text(const ModelConfig& config) {
    std::string out;
    std::size_t offset = 0;
    for (const auto& spec : parameter_manifest(config)) {
        out += spec.name + "\t" + shape_field(spec.shape) + "\t" + std::to_string(offset) + "\n";
        offset += shape_numel(spec.shape) * sizeof(float);
    }
    return out;
}

}  // namespace

void TransformerModel::save(const std::filesystem::path& dir) const {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    write_file(dir / kConfigFile, config_.to_text());
    write_file(dir / kManifestFile, manifest_text(config_));
    std::string blob;
    blob.reserve(num_parameters() * sizeof(float));
    for (const auto& p : params_) {
        auto d = p.tensor.data();
        blob.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(float));
    }
    write_file(dir / kWeightsFile, blob);
}

TransformerModel TransformerModel::load(const std::filesystem::path& dir) {
    const ModelConfig config = ModelConfig::load(dir / kConfigFile);
    if (read_file(dir / kManifestFile) != manifest_text(config)) {
        fail(ErrorKind::data, (dir / kManifestFile).string() + " does not match the configuration");
    }
    const std::string blob = read_file(dir / kWeightsFile);
    if (blob.size() != param_count(config) * sizeof(float)) {
        fail(ErrorKind::data, (dir / kWeightsFile).string() + " has " + std::to_string(blob.size()) + " bytes, expected " +
                                  std::to_string(param_count(config) * sizeof(float)));
    }
    TransformerModel m;
    m.config_ = config;
    std::size_t offset = 0;
    for (const auto& spec : parameter_manifest(config)) {
        std::vector<float> values(shape_numel(spec.shape));
        std::memcpy(values.data(), blob.data() + offset, values.size() * sizeof(float));
        offset += values.size() * sizeof(float);
        m.params_.push_back({spec.name, Tensor::parameter(spec.shape, std::move(values))});
    }
    m.bind();
    if (!m.all_finite()) fail(ErrorKind::numeric, "checkpoint " + dir.string() + " contains non-finite weights");
    return m;
}

}  // namespace tinylm
