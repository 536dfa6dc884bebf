#include "peftlab/adapters.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "peftlab/errors.h"

namespace peftlab {

namespace {

// Shortest form with at least one decimal: 1 -> "1.0", 0.25 -> "0.25".
std::string format_number(double v) {
    std::ostringstream os;
    os << v;
    std::string s = os.str();
    if (s.find_first_of(".e") == std::string::npos) s += ".0";
    return s;
}

std::size_t activation_width(const ModelConfig& model, SiteKind kind) {
    return kind == SiteKind::kActFfn ? model.d_ff : model.d_model;
}

std::pair<std::size_t, std::size_t> weight_shape(const ModelConfig& model, SiteKind kind) {
    switch (kind) {
        case SiteKind::kFfnIn: return {model.d_model, model.d_ff};
        case SiteKind::kFfnOut: return {model.d_ff, model.d_model};
        default: return {model.d_model, model.d_model};
    }
}

Tensor gaussian(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = dist(rng);
    return Tensor({rows, cols}, std::move(v), true);
}

Tensor dropout_input(Tape& tape, const Tensor& x, double p, const ForwardContext& ctx) {
    if (!ctx.training || p <= 0.0) return x;
    if (!ctx.rng) throw UsageError("adapter dropout needs a random generator in training mode");
    std::bernoulli_distribution keep(1.0 - p);
    const double inv = 1.0 / (1.0 - p);
    std::vector<double> mask(x.numel());
    for (auto& m : mask) m = keep(*ctx.rng) ? inv : 0.0;
    return mul(tape, x, Tensor(x.shape(), std::move(mask)));
}

void check_site_shapes(const Tensor& w0, const Tensor& a, const Tensor& b) {
    if (w0.rank() != 2 || a.rank() != 2 || b.rank() != 2 || a.rows() != w0.rows() ||
        b.cols() != w0.cols() || a.cols() != b.rows()) {
        throw DimensionError("adapter factors " + shape_to_string(a.shape()) + " x " +
                             shape_to_string(b.shape()) + " do not match base weight " +
                             shape_to_string(w0.shape()));
    }
}

}  // namespace

std::string to_string(AdapterMethod m) {
    switch (m) {
        case AdapterMethod::kLora: return "lora";
        case AdapterMethod::kAdaLora: return "adalora";
        case AdapterMethod::kIa3: return "ia3";
    }
    return "?";
}

AdapterMethod parse_adapter_method(const std::string& s) {
    if (s == "lora") return AdapterMethod::kLora;
    if (s == "adalora") return AdapterMethod::kAdaLora;
    if (s == "ia3") return AdapterMethod::kIa3;
    throw ConfigError("unknown adapter method '" + s + "' (expected lora, adalora or ia3)");
}

std::set<SiteKind> AdapterConfig::default_targets(AdapterMethod m) {
    if (m == AdapterMethod::kIa3) return {SiteKind::kActK, SiteKind::kActV, SiteKind::kActFfn};
    return {SiteKind::kQ, SiteKind::kV};
}

AdapterConfig AdapterConfig::lora(std::size_t rank, double dropout) {
    AdapterConfig c;
    c.method = AdapterMethod::kLora;
    c.rank = rank;
    c.dropout = dropout;
    c.target_sites = default_targets(c.method);
    return c;
}

AdapterConfig AdapterConfig::adalora(std::size_t rank, double budget, double lambda) {
    AdapterConfig c;
    c.method = AdapterMethod::kAdaLora;
    c.rank = rank;
    c.budget = budget;
    c.lambda = lambda;
    c.target_sites = default_targets(c.method);
    return c;
}

AdapterConfig AdapterConfig::ia3(std::optional<std::size_t> last_n) {
    AdapterConfig c;
    c.method = AdapterMethod::kIa3;
    c.last_n = last_n;
    c.target_sites = default_targets(c.method);
    return c;
}

void AdapterConfig::validate(const ModelConfig& model) const {
    if (method != AdapterMethod::kIa3 && rank < 1) throw ConfigError("adapter rank must be >= 1");
    if (lambda < 0.0 || !std::isfinite(lambda)) throw ConfigError("lambda must be a finite value >= 0");
    if (!(budget > 0.0)) throw ConfigError("budget must be > 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
    if (last_n) {
        if (*last_n < 1) throw ConfigError("layer scope last_n must be >= 1");
        if (*last_n > model.n_dec_layers) {
            throw ConfigError("layer scope last " + std::to_string(*last_n) + " exceeds the " +
                              std::to_string(model.n_dec_layers) + " decoder layers");
        }
    }
    if (target_sites.empty()) throw ConfigError("adapter config selects no target sites");
    for (auto k : target_sites) {
        const bool act = is_activation_kind(k);
        if (method == AdapterMethod::kIa3 && !act) {
            throw ConfigError("ia3 targets activation sites, got '" + to_string(k) + "'");
        }
        if (method != AdapterMethod::kIa3 && act) {
            throw ConfigError(to_string(method) + " targets projection sites, got '" + to_string(k) + "'");
        }
    }
}

std::string AdapterConfig::label() const {
    switch (method) {
        case AdapterMethod::kLora: {
            std::string s = "Rank=" + std::to_string(rank);
            if (dropout > 0.0) s += ", Drop=" + format_number(dropout);
            return s;
        }
        case AdapterMethod::kAdaLora:
            return "Budget=" + format_number(budget) + ", Init Rank=" + std::to_string(rank);
        case AdapterMethod::kIa3:
            return last_n ? "Reduced Scope (Last " + std::to_string(*last_n) + ")"
                          : std::string("Default (All Layers)");
    }
    return "?";
}

std::vector<SiteId> enumerate_sites(const AdapterConfig& config, const ModelConfig& model) {
    std::vector<SiteId> out;
    auto wanted = [&](SiteKind k) {
        return config.target_sites.count(k) || config.target_sites.count(base_kind(k));
    };
    if (!config.last_n) {
        for (std::size_t l = 0; l < model.n_enc_layers; ++l) {
            for (int k = 0; k <= static_cast<int>(SiteKind::kCrossActV); ++k) {
                const auto kind = static_cast<SiteKind>(k);
                if (!is_cross_kind(kind) && config.target_sites.count(kind)) {
                    out.push_back({Stack::kEncoder, l, kind});
                }
            }
        }
    }
    const std::size_t first_dec = config.last_n ? model.n_dec_layers - *config.last_n : 0;
    for (std::size_t l = first_dec; l < model.n_dec_layers; ++l) {
        for (int k = 0; k <= static_cast<int>(SiteKind::kCrossActV); ++k) {
            const auto kind = static_cast<SiteKind>(k);
            if (wanted(kind)) out.push_back({Stack::kDecoder, l, kind});
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

AdapterSet init_adapters(const AdapterConfig& config, const ModelConfig& model, std::uint64_t seed) {
    model.validate();
    config.validate(model);
    AdapterSet set(config);
    std::mt19937_64 rng(seed);
    for (const auto& site : enumerate_sites(config, model)) {
        if (config.method == AdapterMethod::kIa3) {
            set.mutable_sites().emplace(
                site, Ia3Site{Tensor::full({activation_width(model, site.kind)}, 1.0, true)});
            continue;
        }
        const auto [d, k] = weight_shape(model, site.kind);
        Tensor a = gaussian(d, config.rank, 0.02, rng);
        Tensor b = Tensor::zeros({config.rank, k}, true);
        if (config.method == AdapterMethod::kLora) {
            set.mutable_sites().emplace(site, LoraSite{a, b});
        } else {
            set.mutable_sites().emplace(
                site, AdaLoraSite{a, Tensor::full({config.rank}, 1.0, true), b,
                                  Tensor::full({config.rank}, 1.0)});
        }
    }
    return set;
}

Tensor AdapterSet::project(Tape& tape, const SiteId& site, const Tensor& x, const Tensor& w0,
                           const ForwardContext& ctx) const {
    Tensor base = matmul(tape, x, w0);
    auto it = sites_.find(site);
    if (it == sites_.end()) return base;
    if (const auto* s = std::get_if<LoraSite>(&it->second)) {
        const Tensor xin = dropout_input(tape, x, config_.dropout, ctx);
        return add(tape, base, matmul(tape, matmul(tape, xin, s->a), s->b));
    }
    if (const auto* s = std::get_if<AdaLoraSite>(&it->second)) {
        const Tensor xin = dropout_input(tape, x, config_.dropout, ctx);
        Tensor u = matmul(tape, xin, s->a);
        u = mul(tape, u, mul(tape, s->alpha, s->keep));
        return add(tape, base, matmul(tape, u, s->b));
    }
    return base;
}

Tensor AdapterSet::scale_activation(Tape& tape, const SiteId& site, const Tensor& h) const {
    auto it = sites_.find(site);
    if (it == sites_.end()) return h;
    if (const auto* s = std::get_if<Ia3Site>(&it->second)) return peftlab::scale_activation(tape, h, *s);
    return h;
}

std::vector<TrainableTensor> AdapterSet::trainable() const {
    std::vector<TrainableTensor> out;
    for (const auto& [site, state] : sites_) {
        const std::string p = site.str() + ".";
        if (const auto* s = std::get_if<LoraSite>(&state)) {
            out.push_back({p + "a", s->a, {}});
            out.push_back({p + "b", s->b, {}});
        } else if (const auto* s = std::get_if<AdaLoraSite>(&state)) {
            const std::size_t r = s->alpha.numel();
            std::vector<std::uint8_t> fa, fb, fal(r, 0);
            bool any = false;
            for (std::size_t i = 0; i < r; ++i) any = any || s->pruned(i);
            if (any) {
                const std::size_t d = s->a.rows(), k = s->b.cols();
                fa.assign(d * r, 0);
                fb.assign(r * k, 0);
                for (std::size_t i = 0; i < r; ++i) {
                    if (!s->pruned(i)) continue;
                    fal[i] = 1;
                    for (std::size_t row = 0; row < d; ++row) fa[row * r + i] = 1;
                    for (std::size_t col = 0; col < k; ++col) fb[i * k + col] = 1;
                }
            } else {
                fal.clear();
            }
            out.push_back({p + "a", s->a, std::move(fa)});
            out.push_back({p + "alpha", s->alpha, std::move(fal)});
            out.push_back({p + "b", s->b, std::move(fb)});
        } else if (const auto* s = std::get_if<Ia3Site>(&state)) {
            out.push_back({p + "gamma", s->gamma, {}});
        }
    }
    return out;
}

std::size_t AdapterSet::trainable_count() const {
    std::size_t n = 0;
    for (const auto& t : trainable()) n += t.tensor.numel();
    return n;
}

void AdapterSet::zero_grad() const {
    for (auto& t : trainable()) t.tensor.zero_grad();
}

AdapterSet AdapterSet::clone() const {
    AdapterSet out(config_);
    for (const auto& [site, state] : sites_) {
        std::visit(
            [&, site = site](const auto& s) {
                using T = std::decay_t<decltype(s)>;
                if constexpr (std::is_same_v<T, LoraSite>) {
                    out.sites_.emplace(site, LoraSite{s.a.clone(), s.b.clone()});
                } else if constexpr (std::is_same_v<T, AdaLoraSite>) {
                    out.sites_.emplace(site, AdaLoraSite{s.a.clone(), s.alpha.clone(), s.b.clone(),
                                                         s.keep.clone()});
                } else {
                    out.sites_.emplace(site, Ia3Site{s.gamma.clone()});
                }
            },
            state);
    }
    return out;
}

Tensor effective_weight(const Tensor& w0, const SiteState& site) {
    if (std::holds_alternative<Ia3Site>(site)) {
        throw UsageError("effective_weight: (IA)^3 sites have no weight-space form");
    }
    std::vector<double> w(w0.values().begin(), w0.values().end());
    const std::size_t d = w0.rows(), k = w0.cols();
    auto accumulate = [&](const Tensor& a, const Tensor& b, const Tensor* alpha, const Tensor* keep) {
        check_site_shapes(w0, a, b);
        const std::size_t r = a.cols();
        auto av = a.values(), bv = b.values();
        for (std::size_t c = 0; c < r; ++c) {
            const double s = alpha ? alpha->at(c) * keep->at(c) : 1.0;
            if (s == 0.0) continue;
            for (std::size_t i = 0; i < d; ++i) {
                const double ai = av[i * r + c] * s;
                if (ai == 0.0) continue;
                for (std::size_t j = 0; j < k; ++j) w[i * k + j] += ai * bv[c * k + j];
            }
        }
    };
    if (const auto* s = std::get_if<LoraSite>(&site)) {
        accumulate(s->a, s->b, nullptr, nullptr);
    } else {
        const auto& ada = std::get<AdaLoraSite>(site);
        accumulate(ada.a, ada.b, &ada.alpha, &ada.keep);
    }
    return Tensor(w0.shape(), std::move(w));
}

Tensor scale_activation(Tape& tape, const Tensor& h, const Ia3Site& site) {
    if (site.gamma.rank() != 1 || site.gamma.numel() != h.cols()) {
        throw DimensionError("scale_activation: gamma " + shape_to_string(site.gamma.shape()) +
                             " does not match activation width of " + shape_to_string(h.shape()));
    }
    return mul(tape, h, site.gamma);
}

Tensor regularizer(Tape& tape, const AdapterSet& adapters) {
    if (adapters.method() != AdapterMethod::kAdaLora || adapters.empty()) return Tensor::scalar(0.0);
    Tensor total;
    for (const auto& [site, state] : adapters.sites()) {
        const auto& s = std::get<AdaLoraSite>(state);
        Tensor term = l1_norm(tape, s.alpha);
        total = total.defined() ? add(tape, total, term) : term;
    }
    return total;
}

std::size_t retained_components(const AdapterSet& adapters) {
    if (adapters.method() != AdapterMethod::kAdaLora) {
        throw UsageError("retained_components: adapters are not adalora");
    }
    std::size_t total = 0;
    for (const auto& [site, state] : adapters.sites()) {
        const auto& s = std::get<AdaLoraSite>(state);
        total += s.alpha.numel();
    }
    const double target = std::ceil(adapters.config().effective_budget() * static_cast<double>(total) - 1e-9);
    return std::min(total, static_cast<std::size_t>(target));
}

void prune_ranks_in_place(AdapterSet& adapters) {
    if (adapters.method() != AdapterMethod::kAdaLora) {
        throw UsageError("prune_ranks: only adalora adapters have rank components, got " +
                         to_string(adapters.method()));
    }
    struct Component {
        AdaLoraSite* site;
        std::size_t index;
        double magnitude;
    };
    std::vector<Component> comps;
    for (auto& [id, state] : adapters.mutable_sites()) {
        auto& s = std::get<AdaLoraSite>(state);
        for (std::size_t i = 0; i < s.alpha.numel(); ++i) {
            comps.push_back({&s, i, s.pruned(i) ? -1.0 : std::abs(s.alpha.at(i))});
        }
    }
    const std::size_t keep = retained_components(adapters);
    std::stable_sort(comps.begin(), comps.end(),
                     [](const Component& x, const Component& y) { return x.magnitude > y.magnitude; });
    for (std::size_t i = keep; i < comps.size(); ++i) {
        auto& c = comps[i];
        c.site->keep.mutable_values()[c.index] = 0.0;
        c.site->alpha.mutable_values()[c.index] = 0.0;
    }
}

AdapterSet prune_ranks(const AdapterSet& adapters) {
    AdapterSet out = adapters.clone();
    prune_ranks_in_place(out);
    return out;
}

ModelParams merge(const AdapterSet& adapters, const ModelParams& params) {
    ModelParams out = params.clone();
    auto slot = [&](const SiteId& id) -> Tensor* {
        AttentionWeights* self = nullptr;
        AttentionWeights* cross = nullptr;
        Tensor *fi = nullptr, *fo = nullptr;
        if (id.stack == Stack::kEncoder) {
            auto& L = out.encoder.at(id.layer);
            self = &L.self_attn;
            fi = &L.ffn_in;
            fo = &L.ffn_out;
        } else {
            auto& L = out.decoder.at(id.layer);
            self = &L.self_attn;
            cross = &L.cross_attn;
            fi = &L.ffn_in;
            fo = &L.ffn_out;
        }
        switch (id.kind) {
            case SiteKind::kQ: return &self->q;
            case SiteKind::kK: case SiteKind::kActK: return &self->k;
            case SiteKind::kV: case SiteKind::kActV: return &self->v;
            case SiteKind::kO: return &self->o;
            case SiteKind::kCrossQ: return &cross->q;
            case SiteKind::kCrossK: case SiteKind::kCrossActK: return &cross->k;
            case SiteKind::kCrossV: case SiteKind::kCrossActV: return &cross->v;
            case SiteKind::kCrossO: return &cross->o;
            case SiteKind::kFfnIn: return fi;
            case SiteKind::kFfnOut: case SiteKind::kActFfn: return fo;
        }
        return nullptr;
    };
    for (const auto& [id, state] : adapters.sites()) {
        Tensor* w = slot(id);
        if (const auto* s = std::get_if<Ia3Site>(&state)) {
            auto wv = w->mutable_values();
            const std::size_t rows = w->rows(), cols = w->cols();
            auto g = s->gamma.values();
            if (id.kind == SiteKind::kActFfn) {
                // gamma scales the FFN hidden units, i.e. the rows of ffn_out.
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < cols; ++j) wv[i * cols + j] *= g[i];
            } else {
                // gamma scales the projection output, i.e. the columns of W.
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < cols; ++j) wv[i * cols + j] *= g[j];
            }
        } else {
            *w = effective_weight(*w, state);
        }
    }
    out.set_requires_grad(false);
    return out;
}

double trainable_fraction(const AdapterSet& adapters, const ModelParams& params) {
    return static_cast<double>(adapters.trainable_count()) /
           static_cast<double>(params.parameter_count());
}

}  // namespace peftlab
