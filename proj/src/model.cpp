#include "peftlab/model.h"

#include <algorithm>
#include <array>
#include <cmath>

#include "peftlab/errors.h"

namespace peftlab {

namespace {

constexpr std::array<std::pair<SiteKind, const char*>, 15> kKindNames{{
    {SiteKind::kQ, "q"},
    {SiteKind::kK, "k"},
    {SiteKind::kV, "v"},
    {SiteKind::kO, "o"},
    {SiteKind::kCrossQ, "cross_q"},
    {SiteKind::kCrossK, "cross_k"},
    {SiteKind::kCrossV, "cross_v"},
    {SiteKind::kCrossO, "cross_o"},
    {SiteKind::kFfnIn, "ffn_in"},
    {SiteKind::kFfnOut, "ffn_out"},
    {SiteKind::kActK, "act_k"},
    {SiteKind::kActV, "act_v"},
    {SiteKind::kActFfn, "act_ffn"},
    {SiteKind::kCrossActK, "cross_act_k"},
    {SiteKind::kCrossActV, "cross_act_v"},
}};

Tensor xavier(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = dist(rng);
    return Tensor({rows, cols}, std::move(v));
}

Tensor ones(std::size_t n) { return Tensor::full({n}, 1.0); }

class PlainProjection final : public AdapterHooks {
public:
    Tensor project(Tape& tape, const SiteId&, const Tensor& x, const Tensor& w0,
                   const ForwardContext&) const override {
        return matmul(tape, x, w0);
    }
    Tensor scale_activation(Tape&, const SiteId&, const Tensor& h) const override { return h; }
};

const AdapterHooks& hooks_or_plain(const AdapterHooks* adapters) {
    static const PlainProjection plain;
    return adapters ? *adapters : plain;
}

TokenId decoder_start_id(const ModelConfig& config) {
    return config.vocab_size > static_cast<std::size_t>(kBosId) ? kBosId : 0;
}

std::vector<TokenId> iota_positions(std::size_t n) {
    std::vector<TokenId> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<TokenId>(i);
    return p;
}

// Encoder positions count backwards from the last non-pad token, so the
// query at the end of a k-shot prompt always sees the same embeddings.
std::vector<TokenId> tail_positions(std::span<const TokenId> ids) {
    std::vector<TokenId> p(ids.size(), 0);
    TokenId next = 0;
    for (std::size_t i = ids.size(); i-- > 0;) {
        if (ids[i] == kPadId) continue;
        p[i] = next++;
    }
    return p;
}

void check_length(const ModelConfig& config, std::size_t n, const char* what) {
    if (n == 0) throw LengthError(std::string(what) + " is empty");
    if (n > config.max_seq_len) {
        throw LengthError(std::string(what) + " has " + std::to_string(n) +
                          " tokens, exceeding max_seq_len " + std::to_string(config.max_seq_len));
    }
}

AttentionMask key_mask_for(std::span<const TokenId> ids) {
    AttentionMask mask;
    if (std::find(ids.begin(), ids.end(), kPadId) != ids.end()) {
        mask.key_valid.resize(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) mask.key_valid[i] = ids[i] != kPadId;
    }
    return mask;
}

struct SiteSet {
    SiteKind q, k, v, o, act_k, act_v;
};
constexpr SiteSet kSelfSites{SiteKind::kQ, SiteKind::kK, SiteKind::kV,
                             SiteKind::kO, SiteKind::kActK, SiteKind::kActV};
constexpr SiteSet kCrossSites{SiteKind::kCrossQ, SiteKind::kCrossK, SiteKind::kCrossV,
                              SiteKind::kCrossO, SiteKind::kCrossActK, SiteKind::kCrossActV};

Tensor attention_block(Tape& tape, const AdapterHooks& hooks, const ForwardContext& ctx, Stack stack,
                       std::size_t layer, const SiteSet& kinds, const AttentionWeights& w,
                       const Tensor& query_in, const Tensor& kv_in, std::size_t n_heads,
                       const AttentionMask& mask) {
    auto site = [&](SiteKind k) { return SiteId{stack, layer, k}; };
    Tensor q = hooks.project(tape, site(kinds.q), query_in, w.q, ctx);
    Tensor k = hooks.project(tape, site(kinds.k), kv_in, w.k, ctx);
    Tensor v = hooks.project(tape, site(kinds.v), kv_in, w.v, ctx);
    k = hooks.scale_activation(tape, site(kinds.act_k), k);
    v = hooks.scale_activation(tape, site(kinds.act_v), v);
    Tensor a = attention(tape, q, k, v, n_heads, mask);
    return hooks.project(tape, site(kinds.o), a, w.o, ctx);
}

Tensor ffn_block(Tape& tape, const AdapterHooks& hooks, const ForwardContext& ctx, Stack stack,
                 std::size_t layer, const Tensor& ffn_in, const Tensor& ffn_out, const Tensor& x) {
    Tensor h = relu(tape, hooks.project(tape, {stack, layer, SiteKind::kFfnIn}, x, ffn_in, ctx));
    h = hooks.scale_activation(tape, {stack, layer, SiteKind::kActFfn}, h);
    return hooks.project(tape, {stack, layer, SiteKind::kFfnOut}, h, ffn_out, ctx);
}

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size < 1 || d_model < 1 || n_heads < 1 || n_enc_layers < 1 || n_dec_layers < 1 ||
        d_ff < 1 || max_seq_len < 1) {
        throw ConfigError("model config: every field must be >= 1");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("model config: d_model " + std::to_string(d_model) +
                          " is not divisible by n_heads " + std::to_string(n_heads));
    }
}

std::string to_string(Stack s) { return s == Stack::kEncoder ? "encoder" : "decoder"; }

std::string to_string(SiteKind k) {
    for (const auto& [kind, name] : kKindNames) {
        if (kind == k) return name;
    }
    return "?";
}

SiteKind parse_site_kind(const std::string& s) {
    for (const auto& [kind, name] : kKindNames) {
        if (s == name) return kind;
    }
    throw DataError("unknown site kind '" + s + "'");
}

bool is_activation_kind(SiteKind k) {
    return k == SiteKind::kActK || k == SiteKind::kActV || k == SiteKind::kActFfn ||
           k == SiteKind::kCrossActK || k == SiteKind::kCrossActV;
}

bool is_cross_kind(SiteKind k) {
    return k == SiteKind::kCrossQ || k == SiteKind::kCrossK || k == SiteKind::kCrossV ||
           k == SiteKind::kCrossO || k == SiteKind::kCrossActK || k == SiteKind::kCrossActV;
}

SiteKind base_kind(SiteKind k) {
    switch (k) {
        case SiteKind::kCrossQ: return SiteKind::kQ;
        case SiteKind::kCrossK: return SiteKind::kK;
        case SiteKind::kCrossV: return SiteKind::kV;
        case SiteKind::kCrossO: return SiteKind::kO;
        case SiteKind::kCrossActK: return SiteKind::kActK;
        case SiteKind::kCrossActV: return SiteKind::kActV;
        default: return k;
    }
}

std::string SiteId::str() const {
    return to_string(stack) + "." + std::to_string(layer) + "." + to_string(kind);
}

SiteId SiteId::parse(const std::string& s) {
    const auto a = s.find('.');
    const auto b = a == std::string::npos ? a : s.find('.', a + 1);
    if (b == std::string::npos) throw DataError("malformed site id '" + s + "'");
    SiteId id;
    const std::string stack = s.substr(0, a);
    if (stack == "encoder") {
        id.stack = Stack::kEncoder;
    } else if (stack == "decoder") {
        id.stack = Stack::kDecoder;
    } else {
        throw DataError("malformed site id '" + s + "': unknown stack");
    }
    try {
        std::size_t used = 0;
        const std::string layer = s.substr(a + 1, b - a - 1);
        id.layer = std::stoul(layer, &used);
        if (used != layer.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
        throw DataError("malformed site id '" + s + "': bad layer index");
    }
    id.kind = parse_site_kind(s.substr(b + 1));
    if (id.stack == Stack::kEncoder && is_cross_kind(id.kind)) {
        throw DataError("malformed site id '" + s + "': encoder has no cross attention");
    }
    return id;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("embedding", embedding);
    out.emplace_back("encoder.positions", enc_positions);
    out.emplace_back("decoder.positions", dec_positions);
    auto site = [](Stack s, std::size_t l, SiteKind k) { return SiteId{s, l, k}.str(); };
    for (std::size_t l = 0; l < encoder.size(); ++l) {
        const auto& L = encoder[l];
        const std::string p = "encoder." + std::to_string(l) + ".";
        out.emplace_back(p + "attn_norm", L.attn_norm);
        out.emplace_back(site(Stack::kEncoder, l, SiteKind::kQ), L.self_attn.q);
        out.emplace_back(site(Stack::kEncoder, l, SiteKind::kK), L.self_attn.k);
        out.emplace_back(site(Stack::kEncoder, l, SiteKind::kV), L.self_attn.v);
        out.emplace_back(site(Stack::kEncoder, l, SiteKind::kO), L.self_attn.o);
        out.emplace_back(p + "ffn_norm", L.ffn_norm);
        out.emplace_back(site(Stack::kEncoder, l, SiteKind::kFfnIn), L.ffn_in);
        out.emplace_back(site(Stack::kEncoder, l, SiteKind::kFfnOut), L.ffn_out);
    }
    for (std::size_t l = 0; l < decoder.size(); ++l) {
        const auto& L = decoder[l];
        const std::string p = "decoder." + std::to_string(l) + ".";
        out.emplace_back(p + "self_norm", L.self_norm);
        out.emplace_back(site(Stack::kDecoder, l, SiteKind::kQ), L.self_attn.q);
        out.emplace_back(site(Stack::kDecoder, l, SiteKind::kK), L.self_attn.k);
        out.emplace_back(site(Stack::kDecoder, l, SiteKind::kV), L.self_attn.v);
        out.emplace_back(site(Stack::kDecoder, l, SiteKind::kO), L.self_attn.o);
        out.emplace_back(p + "cross_norm", L.cross_norm);
        out.emplace_back(site(Stack::kDecoder, l, SiteKind::kCrossQ), L.cross_attn.q);
        out.emplace_back(site(Stack::kDecoder, l, SiteKind::kCrossK), L.cross_attn.k);
        out.emplace_back(site(Stack::kDecoder, l, SiteKind::kCrossV), L.cross_attn.v);
        out.emplace_back(site(Stack::kDecoder, l, SiteKind::kCrossO), L.cross_attn.o);
        out.emplace_back(p + "ffn_norm", L.ffn_norm);
        out.emplace_back(site(Stack::kDecoder, l, SiteKind::kFfnIn), L.ffn_in);
        out.emplace_back(site(Stack::kDecoder, l, SiteKind::kFfnOut), L.ffn_out);
    }
    out.emplace_back("encoder.final_norm", enc_final_norm);
    out.emplace_back("decoder.final_norm", dec_final_norm);
    return out;
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named()) n += t.numel();
    return n;
}

Tensor ModelParams::site_weight(const SiteId& site) const {
    if (is_activation_kind(site.kind)) {
        throw UsageError("site " + site.str() + " is an activation site with no weight");
    }
    const bool enc = site.stack == Stack::kEncoder;
    const std::size_t n_layers = enc ? encoder.size() : decoder.size();
    if (site.layer >= n_layers) throw UsageError("site " + site.str() + " is outside the model");
    if (enc && is_cross_kind(site.kind)) throw UsageError("encoder has no site " + site.str());
    auto pick = [&](const AttentionWeights& s, const AttentionWeights* c, const Tensor& fi,
                    const Tensor& fo) -> Tensor {
        switch (site.kind) {
            case SiteKind::kQ: return s.q;
            case SiteKind::kK: return s.k;
            case SiteKind::kV: return s.v;
            case SiteKind::kO: return s.o;
            case SiteKind::kCrossQ: return c->q;
            case SiteKind::kCrossK: return c->k;
            case SiteKind::kCrossV: return c->v;
            case SiteKind::kCrossO: return c->o;
            case SiteKind::kFfnIn: return fi;
            case SiteKind::kFfnOut: return fo;
            default: throw UsageError("site " + site.str() + " has no weight");
        }
    };
    if (enc) {
        const auto& L = encoder[site.layer];
        return pick(L.self_attn, nullptr, L.ffn_in, L.ffn_out);
    }
    const auto& L = decoder[site.layer];
    return pick(L.self_attn, &L.cross_attn, L.ffn_in, L.ffn_out);
}

ModelParams ModelParams::clone() const {
    ModelParams p = *this;
    auto deep = [](AttentionWeights& w) {
        w.q = w.q.clone();
        w.k = w.k.clone();
        w.v = w.v.clone();
        w.o = w.o.clone();
    };
    p.embedding = embedding.clone();
    p.enc_positions = enc_positions.clone();
    p.dec_positions = dec_positions.clone();
    for (auto& L : p.encoder) {
        L.attn_norm = L.attn_norm.clone();
        deep(L.self_attn);
        L.ffn_norm = L.ffn_norm.clone();
        L.ffn_in = L.ffn_in.clone();
        L.ffn_out = L.ffn_out.clone();
    }
    for (auto& L : p.decoder) {
        L.self_norm = L.self_norm.clone();
        deep(L.self_attn);
        L.cross_norm = L.cross_norm.clone();
        deep(L.cross_attn);
        L.ffn_norm = L.ffn_norm.clone();
        L.ffn_in = L.ffn_in.clone();
        L.ffn_out = L.ffn_out.clone();
    }
    p.enc_final_norm = enc_final_norm.clone();
    p.dec_final_norm = dec_final_norm.clone();
    return p;
}

void ModelParams::set_requires_grad(bool flag) const {
    for (auto& [name, t] : named()) {
        Tensor handle = t;
        handle.set_requires_grad(flag);
    }
}

ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = config.d_model;
    ModelParams p;
    p.config = config;
    p.embedding = xavier(config.vocab_size, d, rng);
    p.enc_positions = xavier(config.max_seq_len, d, rng);
    p.dec_positions = xavier(config.max_seq_len, d, rng);
    auto attn = [&] {
        AttentionWeights w;
        w.q = xavier(d, d, rng);
        w.k = xavier(d, d, rng);
        w.v = xavier(d, d, rng);
        w.o = xavier(d, d, rng);
        return w;
    };
    for (std::size_t l = 0; l < config.n_enc_layers; ++l) {
        EncoderLayer L;
        L.attn_norm = ones(d);
        L.self_attn = attn();
        L.ffn_norm = ones(d);
        L.ffn_in = xavier(d, config.d_ff, rng);
        L.ffn_out = xavier(config.d_ff, d, rng);
        p.encoder.push_back(std::move(L));
    }
    for (std::size_t l = 0; l < config.n_dec_layers; ++l) {
        DecoderLayer L;
        L.self_norm = ones(d);
        L.self_attn = attn();
        L.cross_norm = ones(d);
        L.cross_attn = attn();
        L.ffn_norm = ones(d);
        L.ffn_in = xavier(d, config.d_ff, rng);
        L.ffn_out = xavier(config.d_ff, d, rng);
        p.decoder.push_back(std::move(L));
    }
    p.enc_final_norm = ones(d);
    p.dec_final_norm = ones(d);
    return p;
}

ModelParams zero_model(const ModelConfig& config) {
    ModelParams p = init_model(config, 0);
    for (auto& [name, t] : p.named()) {
        Tensor handle = t;
        auto v = handle.mutable_values();
        std::fill(v.begin(), v.end(), 0.0);
    }
    return p;
}

Tensor encode(Tape& tape, const ModelParams& params, const AdapterHooks* adapters,
              std::span<const TokenId> input_ids, const ForwardContext& ctx) {
    const auto& cfg = params.config;
    check_length(cfg, input_ids.size(), "encoder input");
    const AdapterHooks& hooks = hooks_or_plain(adapters);
    const auto positions = tail_positions(input_ids);
    const AttentionMask mask = key_mask_for(input_ids);

    Tensor x = add(tape, embedding_lookup(tape, params.embedding, input_ids),
                   embedding_lookup(tape, params.enc_positions, positions));
    for (std::size_t l = 0; l < params.encoder.size(); ++l) {
        const auto& L = params.encoder[l];
        Tensor h = rms_norm(tape, x, L.attn_norm);
        x = add(tape, x,
                attention_block(tape, hooks, ctx, Stack::kEncoder, l, kSelfSites, L.self_attn, h, h,
                                cfg.n_heads, mask));
        h = rms_norm(tape, x, L.ffn_norm);
        x = add(tape, x, ffn_block(tape, hooks, ctx, Stack::kEncoder, l, L.ffn_in, L.ffn_out, h));
    }
    return rms_norm(tape, x, params.enc_final_norm);
}

Tensor decode(Tape& tape, const ModelParams& params, const AdapterHooks* adapters,
              const Tensor& encoded, std::span<const TokenId> input_ids,
              std::span<const TokenId> decoder_input, const ForwardContext& ctx) {
    const auto& cfg = params.config;
    check_length(cfg, decoder_input.size(), "decoder input");
    const AdapterHooks& hooks = hooks_or_plain(adapters);
    const auto positions = iota_positions(decoder_input.size());
    AttentionMask causal;
    causal.causal = true;
    const AttentionMask cross_mask = key_mask_for(input_ids);

    Tensor y = add(tape, embedding_lookup(tape, params.embedding, decoder_input),
                   embedding_lookup(tape, params.dec_positions, positions));
    for (std::size_t l = 0; l < params.decoder.size(); ++l) {
        const auto& L = params.decoder[l];
        Tensor h = rms_norm(tape, y, L.self_norm);
        y = add(tape, y,
                attention_block(tape, hooks, ctx, Stack::kDecoder, l, kSelfSites, L.self_attn, h, h,
                                cfg.n_heads, causal));
        h = rms_norm(tape, y, L.cross_norm);
        y = add(tape, y,
                attention_block(tape, hooks, ctx, Stack::kDecoder, l, kCrossSites, L.cross_attn, h,
                                encoded, cfg.n_heads, cross_mask));
        h = rms_norm(tape, y, L.ffn_norm);
        y = add(tape, y, ffn_block(tape, hooks, ctx, Stack::kDecoder, l, L.ffn_in, L.ffn_out, h));
    }
    y = rms_norm(tape, y, params.dec_final_norm);
    return scale(tape, matmul_nt(tape, y, params.embedding),
                 1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
}

Tensor forward_logits(Tape& tape, const ModelParams& params, const AdapterHooks* adapters,
                      std::span<const TokenId> input_ids, std::span<const TokenId> target_ids,
                      const ForwardContext& ctx) {
    if (target_ids.empty()) throw LengthError("target sequence is empty");
    Tensor encoded = encode(tape, params, adapters, input_ids, ctx);
    std::vector<TokenId> dec_in;
    dec_in.reserve(target_ids.size());
    dec_in.push_back(decoder_start_id(params.config));
    dec_in.insert(dec_in.end(), target_ids.begin(), target_ids.end() - 1);
    return decode(tape, params, adapters, encoded, input_ids, dec_in, ctx);
}

std::vector<double> log_softmax_rows(const Tensor& logits) {
    const std::size_t rows = logits.rows(), v = logits.cols();
    auto lv = logits.values();
    std::vector<double> out(lv.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = lv.data() + r * v;
        const double mx = *std::max_element(row, row + v);
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
        const double lz = mx + std::log(z);
        for (std::size_t j = 0; j < v; ++j) out[r * v + j] = row[j] - lz;
    }
    return out;
}

double log_likelihood(const ModelParams& params, const AdapterHooks* adapters,
                      std::span<const TokenId> input_ids, std::span<const TokenId> target_ids) {
    Tape tape(false);
    Tensor logits = forward_logits(tape, params, adapters, input_ids, target_ids);
    const auto lp = log_softmax_rows(logits);
    const std::size_t v = logits.cols();
    double total = 0.0;
    for (std::size_t t = 0; t < target_ids.size(); ++t) {
        if (target_ids[t] < 0 || static_cast<std::size_t>(target_ids[t]) >= v) {
            throw DataError("log_likelihood: target id " + std::to_string(target_ids[t]) +
                            " outside vocabulary");
        }
        total += lp[t * v + static_cast<std::size_t>(target_ids[t])];
    }
    return total;
}

std::vector<TokenId> greedy_generate(const ModelParams& params, const AdapterHooks* adapters,
                                     std::span<const TokenId> input_ids, std::size_t max_new,
                                     TokenId eos) {
    if (max_new < 1) throw UsageError("greedy_generate: max_new must be >= 1");
    if (max_new > params.config.max_seq_len) {
        throw LengthError("greedy_generate: max_new " + std::to_string(max_new) +
                          " exceeds max_seq_len " + std::to_string(params.config.max_seq_len));
    }
    Tape tape(false);
    const Tensor encoded = encode(tape, params, adapters, input_ids);
    std::vector<TokenId> dec_in{decoder_start_id(params.config)};
    std::vector<TokenId> out;
    while (out.size() < max_new) {
        tape.clear();
        const Tensor logits = decode(tape, params, adapters, encoded, input_ids, dec_in);
        const std::size_t v = logits.cols();
        const double* last = logits.values().data() + (logits.rows() - 1) * v;
        // max_element returns the first maximum, i.e. the lowest id on ties.
        const auto next = static_cast<TokenId>(std::max_element(last, last + v) - last);
        out.push_back(next);
        if (next == eos) break;
        dec_in.push_back(next);
    }
    return out;
}

}  // namespace peftlab
