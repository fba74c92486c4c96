#include <doctest.h>

#include <cmath>

#include "support/files.hpp"
#include "tinylm/error.hpp"
#include "tinylm/training.hpp"

using namespace tinylm;
using tinylm::testing::TempDir;

namespace {

ModelConfig small_model(Objective objective) {
    ModelConfig c;
    c.objective = objective;
    c.vocab_size = 40;
    c.max_seq_len = 16;
    c.num_layers = 1;
    c.num_heads = 2;
    c.head_size = 8;
    c.ffn_size = 32;
    c.dropout = 0.0f;
    c.attention_dropout = 0.0f;
    c.pos_type = objective == Objective::mlm ? PositionType::relative_key_query : PositionType::absolute;
    return c;
}

// Sentences over a small vocabulary with strong local regularities.
std::vector<std::vector<int>> synthetic_docs(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::vector<int>> docs;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<int> d{kBosId};
        const int subject = static_cast<int>(rng.uniform_int(5, 14));
        d.push_back(subject);
        d.push_back(subject + 10);  // verb agrees with subject
        const int object = static_cast<int>(rng.uniform_int(25, 30));
        d.push_back(object);
        d.push_back(object + 5);
        docs.push_back(d);
    }
    return docs;
}

double normwise(const std::vector<double>& a, const std::vector<double>& b) {
    double diff = 0, na = 0;
    for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]), na += a[i] * a[i];
    return std::sqrt(diff) / std::max(std::sqrt(na), 1e-30);
}

std::vector<double> flat_params(const TransformerModel& m) {
    std::vector<double> out;
    for (const auto& p : m.parameters()) {
        for (float v : p.tensor.data()) out.push_back(v);
    }
    return out;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("masking: degenerate policies") {
    std::vector<int> ids = {kBosId, 7, 8, 9, kEosId, 10, kPadId, kPadId};
    Rng rng(1);
    MaskingPolicy none;
    none.select_prob = 0.0;
    auto a = apply_mlm_masking(ids, none, 50, rng);
    CHECK(a.inputs == ids);
    for (int l : a.labels) CHECK(l == kIgnoreIndex);

    MaskingPolicy all;
    all.select_prob = 1.0;
    all.mask_frac = 1.0;
    all.random_frac = 0.0;
    auto b = apply_mlm_masking(ids, all, 50, rng);
    CHECK(b.inputs == std::vector<int>{kBosId, kMaskId, kMaskId, kMaskId, kEosId, kMaskId, kPadId, kPadId});
    CHECK(b.labels == std::vector<int>{kIgnoreIndex, 7, 8, 9, kIgnoreIndex, 10, kIgnoreIndex, kIgnoreIndex});

    MaskingPolicy bad;
    bad.keep_frac = 0.5;
    CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("masking rates over a million tokens") {
    std::vector<int> ids(1000000);
    Rng fill(3);
    for (auto& id : ids) id = static_cast<int>(fill.uniform_int(kNumSpecialTokens, 999));
    Rng rng(11);
    MaskingPolicy policy;
    auto m = apply_mlm_masking(ids, policy, 1000, rng);
    std::size_t selected = 0, masked = 0, randomized = 0, unchanged = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (m.labels[i] == kIgnoreIndex) {
            CHECK_MESSAGE(m.inputs[i] == ids[i], "unselected position changed");
            continue;
        }
        ++selected;
        CHECK(m.labels[i] == ids[i]);
        if (m.inputs[i] == kMaskId) {
            ++masked;
        } else {
            ++randomized;
            CHECK(m.inputs[i] >= kNumSpecialTokens);
            if (m.inputs[i] == ids[i]) ++unchanged;
        }
    }
    const double sel = double(selected) / double(ids.size());
    const double mask = double(masked) / double(selected);
    CHECK(std::fabs(sel - 0.135) < 0.002);
    CHECK(std::fabs(mask - 8.0 / 9.0) < 0.004);
    // A random replacement hits the original id with probability 1/995.
    CHECK(unchanged < randomized / 100 + 10);
}

TEST_CASE("masking never touches special positions") {
    std::vector<int> ids;
    for (int r = 0; r < 2000; ++r) {
        for (int s = 0; s < kNumSpecialTokens; ++s) ids.push_back(s);
    }
    Rng rng(5);
    MaskingPolicy p;
    p.select_prob = 0.9;
    auto m = apply_mlm_masking(ids, p, 100, rng);
    CHECK(m.inputs == ids);
}

TEST_CASE("causal shift") {
    std::vector<int> abc = {10, 11, 12};
    auto s = clm_shift(abc);
    CHECK(s.inputs == std::vector<int>{10, 11});
    CHECK(s.labels == std::vector<int>{11, 12});
    std::vector<int> pads = {kPadId, kPadId, kPadId};
    CHECK_THROWS_AS(clm_shift(pads), Error);
    std::vector<int> one = {7};
    CHECK_THROWS_AS(clm_shift(one), Error);

    // Packed window: position t of the inputs predicts position t+1 of the window.
    auto packed = pack_corpus({{kBosId, 20, 21}, {kBosId, 22, 23, 24}}, 6);
    REQUIRE(packed.size() == 2);
    for (std::size_t w = 0; w < packed.size(); ++w) {
        auto window = packed.at(w);
        auto sh = clm_shift(window);
        for (std::size_t t = 0; t + 1 < window.size(); ++t) {
            CHECK(sh.inputs[t] == window[t]);
            CHECK(sh.labels[t] == (window[t + 1] == kPadId ? kIgnoreIndex : window[t + 1]));
        }
    }
    CHECK(clm_shift(packed.at(1)).labels == std::vector<int>{24, kIgnoreIndex, kIgnoreIndex, kIgnoreIndex, kIgnoreIndex});
}

TEST_CASE("packing layout") {
    auto one = pack_corpus({{10, 11, 12, 13, 14}}, 8);
    CHECK(one.size() == 1);
    CHECK(one.ids == std::vector<int>{10, 11, 12, 13, 14, kPadId, kPadId, kPadId});

    // 4 + separator + 4 = 9 tokens -> two windows of 8.
    auto two = pack_corpus({{1 + 10, 12, 13, 14}, {21, 22, 23, 24}}, 8);
    CHECK(two.size() == 2);
    CHECK(two.ids == std::vector<int>{11, 12, 13, 14, kEosId, 21, 22, 23, 24, kPadId, kPadId, kPadId, kPadId, kPadId,
                                      kPadId, kPadId});

    std::vector<std::vector<int>> docs = synthetic_docs(37, 1);
    std::size_t content = 0;
    for (const auto& d : docs) content += d.size();
    auto packed = pack_corpus(docs, 7);
    const auto non_pad = std::count_if(packed.ids.begin(), packed.ids.end(), [](int i) { return i != kPadId; });
    CHECK(std::size_t(non_pad) == content + docs.size() - 1);
    CHECK_THROWS_AS(pack_corpus({}, 8), Error);
    CHECK_THROWS_AS(pack_corpus({{}, {}}, 8), Error);
}

TEST_CASE("adamw updates") {
    TrainConfig cfg;
    std::vector<float> p = {1.5f, -2.0f};
    std::vector<float> zero = {0.0f, 0.0f};
    AdamState st;
    adamw_step(p, zero, st, 1, 1e-3, 0.0, cfg);
    CHECK(p == std::vector<float>{1.5f, -2.0f});

    AdamState st2;
    std::vector<float> q = {2.0f};
    std::vector<float> zg = {0.0f};
    adamw_step(q, zg, st2, 1, 0.1, 0.01, cfg);
    CHECK(q[0] == doctest::Approx(2.0 - 0.1 * 0.01 * 2.0).epsilon(1e-7));

    // Two steps on a scalar with g=0.5 then g=-0.25, lr=0.01, wd=0:
    // m1=0.05 v1=0.00025 -> m^=0.5 v^=0.25 -> step 0.5/(0.5+1e-8)
    // m2=0.045-0.025=0.02 v2=0.00024975+0.0000625=0.00031225
    // m^=0.02/0.19=0.10526315789 v^=0.00031225/0.001999=0.15620310155
    AdamState st3;
    std::vector<float> x = {1.0f};
    std::vector<float> g1 = {0.5f}, g2 = {-0.25f};
    adamw_step(x, g1, st3, 1, 0.01, 0.0, cfg);
    const double after1 = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
    CHECK(x[0] == doctest::Approx(after1).epsilon(1e-7));
    adamw_step(x, g2, st3, 2, 0.01, 0.0, cfg);
    const double mhat = 0.02 / (1 - 0.81);
    const double vhat = 0.00031225 / (1 - 0.998001);
    CHECK(x[0] == doctest::Approx(after1 - 0.01 * mhat / (std::sqrt(vhat) + 1e-8)).epsilon(1e-6));

    std::vector<float> nan_grad = {std::nanf("")};
    std::vector<float> y = {3.0f};
    AdamState st4;
    CHECK_THROWS_AS(adamw_step(y, nan_grad, st4, 1, 0.1, 0.0, cfg), Error);
    CHECK(y[0] == 3.0f);
}

TEST_CASE("learning-rate schedule is piecewise linear") {
    const std::size_t total = 100, warm = 6;
    const double peak = 1e-3;
    for (std::size_t s = 1; s <= total; ++s) {
        const double expect = s <= warm ? peak * double(s) / 6.0 : peak * double(total - s) / 94.0;
        CHECK(scheduled_lr(s, total, warm, peak) == doctest::Approx(expect).epsilon(1e-12));
    }
    CHECK(scheduled_lr(warm, total, warm, peak) == peak);
    CHECK(scheduled_lr(total, total, warm, peak) == 0.0);
    CHECK(scheduled_lr(1, 10, 0, 1.0) == doctest::Approx(0.9));
}

TEST_CASE("perplexity definitions") {
    CHECK(std::exp(0.0) == 1.0);
    CHECK(std::exp(3.54) == doctest::Approx(34.46691919085739).epsilon(1e-12));

    for (auto obj : {Objective::mlm, Objective::clm}) {
        auto c = small_model(obj);
        c.vocab_size = 8000;
        auto m = TransformerModel::init(c, 1);
        for (auto& p : m.parameters()) {
            for (auto& v : p.tensor.mutable_data()) v = 0.0f;
        }
        auto data = pack_corpus(synthetic_docs(20, 2), 16);
        auto r = evaluate_perplexity(m, data, MaskingPolicy{}, 7);
        CHECK(r.loss == doctest::Approx(8.987196820661973).epsilon(1e-6));
        CHECK(r.perplexity == doctest::Approx(8000.0).epsilon(1e-5));
        CHECK(r.perplexity == std::exp(r.loss));
        CHECK(r.tokens > 0);
    }
    PackedDataset empty;
    empty.window = 8;
    CHECK_THROWS_AS(evaluate_perplexity(TransformerModel::init(small_model(Objective::clm), 1), empty, {}, 1), Error);
}

TEST_CASE("gradient accumulation matches a larger batch") {
    for (auto obj : {Objective::mlm, Objective::clm}) {
        auto data = pack_corpus(synthetic_docs(30, 4), 12);
        const std::vector<std::size_t> windows = {0, 1, 2, 3};
        TrainConfig big;
        big.batch_size = 4;
        big.grad_accum = 1;
        big.warmup_fraction = 0.0;
        big.learning_rate = 1e-3;
        TrainConfig small = big;
        small.batch_size = 1;
        small.grad_accum = 4;
        MaskingPolicy policy;
        policy.select_prob = 0.5;

        auto m1 = TransformerModel::init(small_model(obj), 5);
        auto m2 = TransformerModel::init(small_model(obj), 5);
        Trainer t1(m1, big, policy, 10);
        Trainer t2(m2, small, policy, 10);
        const double l1 = t1.accumulate(data, windows, 1);
        const double l2 = t2.accumulate(data, windows, 1);
        CHECK(l1 == doctest::Approx(l2).epsilon(1e-5));
        std::vector<double> g1, g2;
        for (const auto& p : m1.parameters()) {
            for (float v : p.tensor.grad()) g1.push_back(v);
        }
        for (const auto& p : m2.parameters()) {
            for (float v : p.tensor.grad()) g2.push_back(v);
        }
        CHECK(normwise(g1, g2) < 1e-5);
        const auto before = flat_params(m1);
        t1.apply_step();
        t2.apply_step();
        auto a = flat_params(m1), b = flat_params(m2);
        std::vector<double> d1(a.size()), d2(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) d1[i] = a[i] - before[i], d2[i] = b[i] - before[i];
        CHECK(normwise(d1, d2) < 1e-5);
    }
}

TEST_CASE("non-finite gradients abort the step") {
    auto m = TransformerModel::init(small_model(Objective::clm), 1);
    TrainConfig cfg;
    Trainer t(m, cfg, {}, 10);
    const auto before = flat_params(m);
    m.parameters()[3].tensor.grad()[0] = std::numeric_limits<float>::infinity();
    try {
        t.apply_step();
        FAIL("expected error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::numeric);
    }
    CHECK(flat_params(m) == before);
    CHECK(t.step() == 0);
}

TEST_CASE("short training runs improve and are reproducible") {
    for (auto obj : {Objective::mlm, Objective::clm}) {
        auto train_data = pack_corpus(synthetic_docs(200, 10), 16);
        auto val_data = pack_corpus(synthetic_docs(40, 99), 16);
        TrainConfig cfg;
        cfg.epochs = 3;
        cfg.batch_size = 4;
        cfg.grad_accum = 2;
        cfg.learning_rate = 3e-3;
        cfg.seed = 17;
        TempDir dir("train");
        cfg.checkpoint_dir = dir / "ckpt";
        cfg.metrics_path = dir / "metrics.jsonl";
        auto m = TransformerModel::init(small_model(obj), 3);
        auto log = train(m, train_data, val_data, cfg, MaskingPolicy{});
        REQUIRE(log.records().size() == 3);
        CAPTURE(to_string(obj));
        CHECK(log.records()[2].val_loss < log.records()[0].val_loss);
        for (const auto& r : log.records()) CHECK(r.perplexity == std::exp(r.val_loss));
        CHECK(std::filesystem::exists(dir / "ckpt" / "epoch-3" / TransformerModel::kWeightsFile));
        auto reloaded = MetricsLog::load(dir / "metrics.jsonl");
        REQUIRE(reloaded.records().size() == 3);
        CHECK(reloaded.records()[1].val_loss == log.records()[1].val_loss);

        cfg.checkpoint_dir.clear();
        cfg.metrics_path.clear();
        auto m2 = TransformerModel::init(small_model(obj), 3);
        auto log2 = train(m2, train_data, val_data, cfg, MaskingPolicy{});
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(log2.records()[i].train_loss == log.records()[i].train_loss);
            CHECK(log2.records()[i].val_loss == log.records()[i].val_loss);
        }
        CHECK(flat_params(m2) == flat_params(m));
    }
}

TEST_CASE("epoch callback can stop training") {
    auto data = pack_corpus(synthetic_docs(40, 1), 16);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.grad_accum = 4;
    auto m = TransformerModel::init(small_model(Objective::clm), 3);
    auto log = train(m, data, data, cfg, {}, [](const EpochRecord& r, const TransformerModel&) { return r.epoch < 2; });
    CHECK(log.records().size() == 2);
}

TEST_CASE("metrics log rules") {
    MetricsLog log;
    log.append({1, 2.0, 2.5, std::exp(2.5), 0.1});
    CHECK_THROWS_AS(log.append({1, 1.0, 1.0, 1.0, 0.1}), Error);
    CHECK(MetricsLog::to_json_line({3, 1.5, 2.0, 7.38905609893065, 0.25}) ==
          R"({"epoch":3,"train_loss":1.5,"val_loss":2.0,"perplexity":7.38905609893065,"wall_time":0.25})");
}

TEST_CASE("train config text round trip") {
    TrainConfig c;
    c.learning_rate = 5e-5;
    c.batch_size = 64;
    c.seed = 9;
    auto kv = KeyValueFile::parse(c.to_text());
    TrainConfig back;
    back.read(kv);
    kv.finish();
    CHECK(back.to_text() == c.to_text());
    back.grad_accum = 0;
    CHECK_THROWS_AS(back.validate(), Error);
}

}  // TEST_SUITE
