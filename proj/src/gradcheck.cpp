#include "peftlab/gradcheck.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <utility>

#include "peftlab/adapters.h"
#include "peftlab/errors.h"
#include "peftlab/model.h"
#include "peftlab/ops.h"

namespace peftlab {

namespace {

using Rng = std::mt19937_64;

struct Problem {
    std::vector<Tensor> leaves;  // the tensors whose gradients are checked
    std::function<Tensor(Tape&)> loss;
};

struct Check {
    std::string name;
    std::function<Problem(Rng&)> build;
};

Tensor uniform(Shape shape, Rng& rng, bool requires_grad = true) {
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = u(rng);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

// sum(out (.) w) for a fixed random w, so every output coordinate matters.
Tensor weighted_sum(Tape& tape, const Tensor& out, const Tensor& w) {
    return sum(tape, mul(tape, out, w));
}

Check unary(std::string name, Shape in, Shape out, std::function<Tensor(Tape&, const Tensor&)> f) {
    return {name, [in, out, f](Rng& rng) {
                Tensor x = uniform(in, rng);
                Tensor w = uniform(out, rng, false);
                return Problem{{x}, [x, w, f](Tape& t) { return weighted_sum(t, f(t, x), w); }};
            }};
}

Check binary(std::string name, Shape sa, Shape sb, Shape out,
             std::function<Tensor(Tape&, const Tensor&, const Tensor&)> f) {
    return {name, [sa, sb, out, f](Rng& rng) {
                Tensor a = uniform(sa, rng);
                Tensor b = uniform(sb, rng);
                Tensor w = uniform(out, rng, false);
                return Problem{{a, b}, [a, b, w, f](Tape& t) { return weighted_sum(t, f(t, a, b), w); }};
            }};
}

Check attention_check(std::string name, bool causal) {
    return {name, [causal](Rng& rng) {
                const std::size_t m = causal ? 5 : 4, n = 5, d = 8;
                Tensor q = uniform({m, d}, rng), k = uniform({n, d}, rng), v = uniform({n, d}, rng);
                Tensor w = uniform({m, d}, rng, false);
                AttentionMask mask;
                mask.causal = causal;
                if (!causal) mask.key_valid = {1, 1, 0, 1, 1};
                return Problem{{q, k, v}, [=](Tape& t) {
                                   return weighted_sum(t, attention(t, q, k, v, 2, mask), w);
                               }};
            }};
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab_size = 9;
    c.d_model = 8;
    c.n_heads = 2;
    c.n_enc_layers = 1;
    c.n_dec_layers = 1;
    c.d_ff = 12;
    c.max_seq_len = 16;
    return c;
}

std::vector<TokenId> random_ids(std::size_t n, Rng& rng) {
    std::uniform_int_distribution<TokenId> u(4, 8);
    std::vector<TokenId> ids(n);
    for (auto& id : ids) id = u(rng);
    return ids;
}

void randomize(Tensor t, Rng& rng) {
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (auto& x : t.mutable_values()) x = u(rng);
}

// One adapter parameter class inside the tiny model.
Check adapter_check(std::string name, AdapterConfig cfg, std::string suffix) {
    return {name, [cfg, suffix](Rng& rng) {
                const ModelConfig mc = tiny_config();
                auto params = std::make_shared<ModelParams>(init_model(mc, rng()));
                auto adapters = std::make_shared<AdapterSet>(init_adapters(cfg, mc, rng()));
                std::vector<Tensor> leaves;
                for (const auto& tt : adapters->trainable()) {
                    randomize(tt.tensor, rng);
                    if (tt.name.ends_with("." + suffix)) leaves.push_back(tt.tensor);
                }
                const auto input = random_ids(5, rng);
                const auto target = random_ids(4, rng);
                return Problem{leaves, [params, adapters, input, target](Tape& t) {
                                   Tensor logits = forward_logits(t, *params, adapters.get(), input, target);
                                   return cross_entropy(t, logits, target, -1);
                               }};
            }};
}

Check transformer_check() {
    return {"transformer", [](Rng& rng) {
                auto params = std::make_shared<ModelParams>(init_model(tiny_config(), rng()));
                params->set_requires_grad(true);
                std::vector<Tensor> leaves;
                for (const auto& [n, t] : params->named()) leaves.push_back(t);
                const auto input = random_ids(5, rng);
                const auto target = random_ids(4, rng);
                return Problem{leaves, [params, input, target](Tape& t) {
                                   Tensor logits = forward_logits(t, *params, nullptr, input, target);
                                   return cross_entropy(t, logits, target, -1);
                               }};
            }};
}

// Identity forward whose adjoint is off by 1.5x.
Tensor corrupted_identity(Tape& tape, const Tensor& x) {
    Tensor out(x.shape(), std::vector<double>(x.values().begin(), x.values().end()), x.requires_grad());
    if (tape.recording() && x.requires_grad()) {
        tape.record(out, [x](std::span<const double> g) {
            std::vector<double> d(g.begin(), g.end());
            for (auto& v : d) v *= 1.5;
            accumulate_grad(x, d);
        });
    }
    return out;
}

std::vector<Check> all_checks() {
    std::vector<Check> c;
    c.push_back(binary("matmul", {3, 4}, {4, 5}, {3, 5},
                       [](Tape& t, const Tensor& a, const Tensor& b) { return matmul(t, a, b); }));
    c.push_back(binary("matmul_nt", {3, 4}, {5, 4}, {3, 5},
                       [](Tape& t, const Tensor& a, const Tensor& b) { return matmul_nt(t, a, b); }));
    c.push_back(binary("add", {3, 4}, {3, 4}, {3, 4},
                       [](Tape& t, const Tensor& a, const Tensor& b) { return add(t, a, b); }));
    c.push_back(binary("mul", {3, 4}, {3, 4}, {3, 4},
                       [](Tape& t, const Tensor& a, const Tensor& b) { return mul(t, a, b); }));
    c.push_back(binary("mul_row", {3, 4}, {4}, {3, 4},
                       [](Tape& t, const Tensor& a, const Tensor& b) { return mul(t, a, b); }));
    c.push_back(unary("scale", {3, 4}, {3, 4}, [](Tape& t, const Tensor& x) { return scale(t, x, -1.7); }));
    c.push_back(unary("relu", {3, 4}, {3, 4}, [](Tape& t, const Tensor& x) { return relu(t, x); }));
    c.push_back(binary("rms_norm", {3, 6}, {6}, {3, 6},
                       [](Tape& t, const Tensor& x, const Tensor& g) { return rms_norm(t, x, g); }));
    c.push_back(unary("embedding_lookup", {5, 4}, {6, 4}, [](Tape& t, const Tensor& table) {
        const std::vector<TokenId> ids{3, 0, 3, 1, 4, 0};
        return embedding_lookup(t, table, ids);
    }));
    c.push_back(unary("softmax", {3, 5}, {3, 5}, [](Tape& t, const Tensor& x) { return softmax(t, x, 1); }));
    c.push_back(
        unary("softmax_axis0", {3, 5}, {3, 5}, [](Tape& t, const Tensor& x) { return softmax(t, x, 0); }));
    c.push_back({"cross_entropy", [](Rng& rng) {
                     Tensor x = uniform({4, 6}, rng);
                     const std::vector<TokenId> targets{2, 0, 5, 1};  // 0 is ignored
                     return Problem{{x}, [x, targets](Tape& t) { return cross_entropy(t, x, targets, 0); }};
                 }});
    c.push_back({"sum", [](Rng& rng) {
                     Tensor x = uniform({3, 4}, rng);
                     return Problem{{x}, [x](Tape& t) { return sum(t, x); }};
                 }});
    c.push_back({"l1_norm", [](Rng& rng) {
                     Tensor x = uniform({7}, rng);
                     return Problem{{x}, [x](Tape& t) { return l1_norm(t, x); }};
                 }});
    c.push_back(attention_check("attention", false));
    c.push_back(attention_check("attention_causal", true));
    c.push_back(transformer_check());
    c.push_back(adapter_check("lora.A", AdapterConfig::lora(2), "a"));
    c.push_back(adapter_check("lora.B", AdapterConfig::lora(2), "b"));
    c.push_back(adapter_check("adalora.A", AdapterConfig::adalora(3, 1.0), "a"));
    c.push_back(adapter_check("adalora.alpha", AdapterConfig::adalora(3, 1.0), "alpha"));
    c.push_back(adapter_check("adalora.B", AdapterConfig::adalora(3, 1.0), "b"));
    c.push_back(adapter_check("ia3.gamma", AdapterConfig::ia3(), "gamma"));
    return c;
}

GradcheckResult run_check(const Check& check, Rng& rng, const GradcheckOptions& opt) {
    GradcheckResult res;
    res.name = check.name;
    const bool corrupt = opt.corrupt == check.name;
    for (std::size_t trial = 0; trial < opt.trials; ++trial) {
        Problem p = check.build(rng);
        for (auto& leaf : p.leaves) leaf.clear_grad();
        {
            Tape tape;
            Tensor loss = p.loss(tape);
            if (corrupt) loss = corrupted_identity(tape, loss);
            tape.backward(loss);
        }
        for (auto& leaf : p.leaves) {
            std::vector<double> analytic(leaf.numel(), 0.0);
            if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
            std::vector<std::size_t> coords(leaf.numel());
            std::iota(coords.begin(), coords.end(), 0);
            if (opt.max_coords != 0 && coords.size() > opt.max_coords) {
                std::shuffle(coords.begin(), coords.end(), rng);
                coords.resize(opt.max_coords);
            }
            auto values = leaf.mutable_values();
            for (std::size_t i : coords) {
                const double orig = values[i];
                Tape plain(false);
                values[i] = orig + opt.step;
                const double fp = p.loss(plain).item();
                values[i] = orig - opt.step;
                const double fm = p.loss(plain).item();
                values[i] = orig;
                const double numeric = (fp - fm) / (2.0 * opt.step);
                const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
                const double err = std::abs(analytic[i] - numeric) / denom;
                res.max_rel_error = std::max(res.max_rel_error, std::isfinite(err) ? err : INFINITY);
                ++res.coords_checked;
            }
        }
    }
    res.passed = res.coords_checked > 0 && res.max_rel_error <= opt.tolerance;
    return res;
}

}  // namespace

std::vector<std::string> gradcheck_names() {
    std::vector<std::string> names;
    for (const auto& c : all_checks()) names.push_back(c.name);
    return names;
}

std::vector<GradcheckResult> run_gradcheck(std::uint64_t seed, const GradcheckOptions& options) {
    const auto checks = all_checks();
    if (!options.corrupt.empty() &&
        std::none_of(checks.begin(), checks.end(), [&](const Check& c) { return c.name == options.corrupt; })) {
        throw ConfigError("gradcheck: unknown check '" + options.corrupt + "'");
    }
    std::vector<GradcheckResult> out;
    for (std::size_t i = 0; i < checks.size(); ++i) {
        Rng rng(seed * 1000003ULL + i);
        out.push_back(run_check(checks[i], rng, options));
    }
    return out;
}

}  // namespace peftlab
