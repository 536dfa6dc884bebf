#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "peftlab/checkpoint.h"
#include "peftlab/errors.h"
#include "peftlab/trainer.h"
#include "test_util.h"

namespace peftlab {
namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab_size = 10;
    c.d_model = 8;
    c.n_heads = 2;
    c.n_enc_layers = 1;
    c.n_dec_layers = 1;
    c.d_ff = 12;
    c.max_seq_len = 12;
    return c;
}

// Label token 4 or 5 by whether token 6 occurs in the input.
std::vector<EncodedExample> toy_data(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<EncodedExample> out;
    for (std::size_t i = 0; i < n; ++i) {
        EncodedExample e;
        const std::size_t len = 2 + rng() % 5;
        for (std::size_t j = 0; j < len; ++j) e.input.push_back(static_cast<TokenId>(6 + rng() % 4));
        const bool has6 = std::find(e.input.begin(), e.input.end(), 6) != e.input.end();
        e.target = {static_cast<TokenId>(has6 ? 4 : 5), kEosId};
        out.push_back(std::move(e));
    }
    return out;
}

TrainConfig quick_config(std::size_t epochs = 3) {
    TrainConfig c;
    c.learning_rate = 1e-2;
    c.batch_size = 4;
    c.epochs = epochs;
    c.seed = 7;
    return c;
}

std::vector<std::vector<double>> snapshot(const AdapterSet& a) {
    std::vector<std::vector<double>> out;
    for (const auto& t : a.trainable()) out.emplace_back(t.tensor.values().begin(), t.tensor.values().end());
    return out;
}

TEST(TotalLoss, ArithmeticAndLoraIgnoresLambda) {
    const ModelConfig mc = tiny_config();
    AdapterSet ada = init_adapters(AdapterConfig::adalora(2, 0.5), mc, 1);
    // Set every alpha so that the L1 norm is 48.
    std::size_t n_alpha = 0;
    for (auto& [site, state] : ada.mutable_sites()) n_alpha += std::get<AdaLoraSite>(state).alpha.numel();
    for (auto& [site, state] : ada.mutable_sites()) {
        auto v = std::get<AdaLoraSite>(state).alpha.mutable_values();
        for (auto& x : v) x = -48.0 / static_cast<double>(n_alpha);
    }
    Tape tape;
    const Tensor task = Tensor::scalar(2.0);
    EXPECT_NEAR(total_loss(tape, task, ada, 0.01).item(), 2.48, 1e-12);
    EXPECT_EQ(total_loss(tape, task, ada, 0.0).item(), 2.0);
    const AdapterSet lora = init_adapters(AdapterConfig::lora(2), mc, 1);
    EXPECT_EQ(total_loss(tape, task, lora, 0.5).item(), 2.0);
}

TEST(AdamW, SingleStepOnQuadratic) {
    Tensor p = Tensor::full({1}, 0.0, true);
    Tape tape;
    const Tensor three = Tensor::full({1}, 3.0);
    Tensor diff = add(tape, p, scale(tape, three, -1.0));
    tape.backward(sum(tape, mul(tape, diff, diff)));
    OptimizerState st;
    const std::vector<TrainableTensor> params{{"p", p, {}}};
    adamw_step(st, params, 0.1);
    EXPECT_NEAR(p.item(), 0.1, 1e-7);
    for (double g : p.grad()) EXPECT_EQ(g, 0.0);
}

TEST(AdamW, FirstStepIsLrTimesSign) {
    Tensor p(Shape{4}, {1.0, -2.0, 0.5, 3.0}, true);
    auto g = p.mutable_grad();
    const std::vector<double> grads{0.3, -1e-4, 250.0, -7.0};
    std::copy(grads.begin(), grads.end(), g.begin());
    OptimizerState st;
    adamw_step(st, std::vector<TrainableTensor>{{"p", p, {}}}, 0.01);
    const std::vector<double> start{1.0, -2.0, 0.5, 3.0};
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_NEAR(p.values()[i], start[i] - 0.01 * (grads[i] > 0 ? 1.0 : -1.0), 1e-6);
    }
}

TEST(AdamW, ZeroGradientLeavesParameters) {
    Tensor p(Shape{3}, {1.0, 2.0, 3.0}, true);
    p.mutable_grad();
    OptimizerState st;
    adamw_step(st, std::vector<TrainableTensor>{{"p", p, {}}}, 0.5);
    EXPECT_EQ(std::vector<double>(p.values().begin(), p.values().end()), (std::vector<double>{1.0, 2.0, 3.0}));
}

TEST(AdamW, MatchesReferenceOverFiveSteps) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd;
    for (double decay : {0.0, 0.01}) {
        Tensor p = testing::random_tensor({4}, rng);
        std::vector<double> ref(p.values().begin(), p.values().end()), m(4, 0.0), v(4, 0.0);
        OptimizerState st;
        st.weight_decay = decay;
        const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
        for (int t = 1; t <= 5; ++t) {
            std::vector<double> g(4);
            for (auto& x : g) x = nd(rng);
            auto pg = p.mutable_grad();
            std::copy(g.begin(), g.end(), pg.begin());
            adamw_step(st, std::vector<TrainableTensor>{{"p", p, {}}}, lr);
            for (std::size_t i = 0; i < 4; ++i) {
                ref[i] -= lr * decay * ref[i];
                m[i] = b1 * m[i] + (1 - b1) * g[i];
                v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
                const double mh = m[i] / (1 - std::pow(b1, t)), vh = v[i] / (1 - std::pow(b2, t));
                ref[i] -= lr * mh / (std::sqrt(vh) + eps);
            }
        }
        EXPECT_LE(testing::max_abs_diff(p.values(), ref), 1e-12);
    }
}

TEST(AdamW, FrozenCoordinatesAndErrors) {
    Tensor p(Shape{2}, {1.0, 1.0}, true);
    auto g = p.mutable_grad();
    g[0] = g[1] = 1.0;
    OptimizerState st;
    adamw_step(st, std::vector<TrainableTensor>{{"p", p, {1, 0}}}, 0.1);
    EXPECT_EQ(p.values()[0], 1.0);
    EXPECT_NE(p.values()[1], 1.0);

    Tensor q(Shape{2}, {1.0, 1.0}, true);
    OptimizerState fresh;
    EXPECT_THROW(adamw_step(fresh, std::vector<TrainableTensor>{{"q", q, {}}}, 0.1), UsageError);
    q.mutable_grad();
    EXPECT_THROW(adamw_step(st, std::vector<TrainableTensor>{{"p", p, {}}, {"q", q, {}}}, 0.1), UsageError);
}

TEST(TrainConfig, Validation) {
    TrainConfig c = quick_config();
    EXPECT_NO_THROW(c.validate());
    c.learning_rate = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = quick_config();
    c.batch_size = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = quick_config();
    c.lambda = -1.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = quick_config(4);
    c.prune_at = 5;
    EXPECT_THROW(c.validate(), ConfigError);
    c.prune_at = std::nullopt;
    EXPECT_EQ(c.effective_prune_at(), 2u);
    EXPECT_EQ(quick_config(5).effective_prune_at(), 3u);
    EXPECT_EQ(quick_config(20).effective_prune_at(), 10u);
}

TEST(TrainConfig, JsonRoundTrip) {
    TrainConfig c = quick_config(9);
    c.lambda = 0.25;
    c.prune_at = 4;
    const TrainConfig d = train_config_from_json(to_json(c));
    EXPECT_EQ(to_json(d), to_json(c));
    EXPECT_THROW(train_config_from_json(nlohmann::json{{"epochs", 0}}), ConfigError);
}

TEST(Train, FreezeInvariantAndOnlyAdaptersChange) {
    const ModelParams base = init_model(tiny_config(), 2);
    const std::string before = serialize_model(base);
    const auto data = toy_data(10, 1);
    for (const auto& cfg : {AdapterConfig::lora(2), AdapterConfig::adalora(2, 2.0), AdapterConfig::ia3()}) {
        AdapterSet ad = init_adapters(cfg, base.config, 4);
        const auto start = snapshot(ad);
        train(base, ad, data, quick_config(2));
        EXPECT_EQ(serialize_model(base), before);
        const auto end = snapshot(ad);
        ASSERT_EQ(start.size(), end.size());
        for (std::size_t i = 0; i < start.size(); ++i) EXPECT_NE(start[i], end[i]) << ad.trainable()[i].name;
    }
}

TEST(Train, ZeroLearningRateStepLeavesEverything) {
    const ModelParams base = init_model(tiny_config(), 2);
    const std::string before = serialize_model(base);
    AdapterSet ad = init_adapters(AdapterConfig::ia3(), base.config, 4);
    const std::string adapters_before = serialize_adapters(ad);
    TrainConfig c = quick_config(1);
    c.learning_rate = std::numeric_limits<double>::min();
    train(base, ad, toy_data(4, 1), c);
    EXPECT_EQ(serialize_model(base), before);
    EXPECT_EQ(serialize_adapters(ad), adapters_before);
}

TEST(Train, DeterministicAcrossRuns) {
    const ModelParams base = init_model(tiny_config(), 5);
    const auto data = toy_data(12, 2);
    AdapterSet a = init_adapters(AdapterConfig::lora(2), base.config, 9);
    AdapterSet b = init_adapters(AdapterConfig::lora(2), base.config, 9);
    const TrainReport ra = train(base, a, data, quick_config());
    const TrainReport rb = train(base, b, data, quick_config());
    EXPECT_EQ(ra.total_loss, rb.total_loss);
    EXPECT_EQ(serialize_adapters(a), serialize_adapters(b));
    EXPECT_EQ(ra.total_loss.size(), 3u);
}

TEST(Train, LossDecreasesOnLearnableToyTask) {
    const ModelParams base = init_model(tiny_config(), 6);
    const auto data = toy_data(32, 3);
    AdapterSet ad = init_adapters(AdapterConfig::lora(4), base.config, 1);
    TrainConfig c = quick_config(15);
    c.learning_rate = 3e-2;
    const TrainReport r = train(base, ad, data, c);
    EXPECT_LT(r.total_loss.back(), r.total_loss.front());
}

TEST(Train, AdaLoraPrunesOnceAndPrunedAlphasStayZero) {
    const ModelParams base = init_model(tiny_config(), 7);
    const auto data = toy_data(10, 4);
    AdapterConfig cfg = AdapterConfig::adalora(4, 0.5, 0.05);
    AdapterSet ad = init_adapters(cfg, base.config, 2);
    std::size_t r_total = 0;
    for (const auto& [s, st] : ad.sites()) r_total += std::get<AdaLoraSite>(st).alpha.numel();

    TrainConfig c = quick_config(4);
    c.lambda = 0.05;
    std::vector<std::vector<double>> alphas_after_epoch;
    const TrainReport r = train(base, ad, data, c, [&](std::size_t, double) {
        std::vector<double> all;
        for (const auto& [s, st] : ad.sites()) {
            const auto& a = std::get<AdaLoraSite>(st);
            for (std::size_t i = 0; i < a.alpha.numel(); ++i) {
                if (a.pruned(i)) all.push_back(a.alpha.at(i));
            }
        }
        alphas_after_epoch.push_back(all);
    });
    ASSERT_TRUE(r.pruned_after_epoch.has_value());
    EXPECT_EQ(*r.pruned_after_epoch, 2u);
    EXPECT_EQ(retained_components(ad), (r_total + 1) / 2);
    EXPECT_TRUE(alphas_after_epoch[0].empty());
    for (std::size_t e = 1; e < alphas_after_epoch.size(); ++e) {
        EXPECT_EQ(alphas_after_epoch[e].size(), r_total / 2);
        for (double a : alphas_after_epoch[e]) EXPECT_EQ(a, 0.0);
    }
    EXPECT_GT(r.regularizer.front(), 0.0);
}

TEST(Train, NonFiniteLossIsTrainingError) {
    ModelParams base = init_model(tiny_config(), 8);
    base.embedding.mutable_values()[6 * 8] = std::numeric_limits<double>::quiet_NaN();
    AdapterSet ad = init_adapters(AdapterConfig::lora(2), base.config, 1);
    EXPECT_THROW(train(base, ad, toy_data(6, 5), quick_config(1)), TrainingError);
}

TEST(Train, RejectsEmptyInputs) {
    const ModelParams base = init_model(tiny_config(), 8);
    AdapterSet ad = init_adapters(AdapterConfig::lora(2), base.config, 1);
    EXPECT_THROW(train(base, ad, {}, quick_config(1)), DataError);
    AdapterSet empty;
    EXPECT_THROW(train(base, empty, toy_data(2, 1), quick_config(1)), UsageError);
}

TEST(Train, ReportJsonRoundTrip) {
    const ModelParams base = init_model(tiny_config(), 9);
    AdapterSet ad = init_adapters(AdapterConfig::adalora(2, 0.5), base.config, 1);
    const TrainReport r = train(base, ad, toy_data(5, 1), quick_config(2));
    const TrainReport s = train_report_from_json(to_json(r));
    EXPECT_EQ(s.total_loss, r.total_loss);
    EXPECT_EQ(s.pruned_after_epoch, r.pruned_after_epoch);
    EXPECT_EQ(s.trainable_fraction, r.trainable_fraction);
    EXPECT_DOUBLE_EQ(r.trainable_fraction, trainable_fraction(ad, base));
}

TEST(BaseTrain, UpdatesBaseAndReducesLoss) {
    ModelParams base = init_model(tiny_config(), 10);
    const std::string before = serialize_model(base);
    TrainConfig c = quick_config(10);
    const auto losses = base_train(base, toy_data(24, 6), c);
    EXPECT_NE(serialize_model(base), before);
    EXPECT_LT(losses.back(), losses.front());
}

TEST(EncodeExamples, AppendsEosAndChecksLength) {
    const auto pool = generate_cohort(Task::kSepsis, 6, 1);
    const Vocabulary v = Vocabulary::build(pool);
    const auto enc = encode_examples(std::span(pool).first(2), v, std::span(pool).subspan(2), 2, 400);
    ASSERT_EQ(enc.size(), 2u);
    EXPECT_EQ(enc[0].target.back(), kEosId);
    EXPECT_EQ(enc[0].target.size(), 2u);
    EXPECT_EQ(enc[0].input, tokenize(few_shot_assemble(std::span(pool).subspan(2), pool[0].prompt_text, 2), v));
    EXPECT_THROW(encode_examples(pool, v, {}, 0, 10), LengthError);
}

}  // namespace
}  // namespace peftlab
