#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "peftlab/ops.h"
#include "peftlab/tensor.h"

namespace peftlab {

// Reserved vocabulary ids shared by the model and the tokenizer.
inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kBosId = 1;
inline constexpr TokenId kEosId = 2;
inline constexpr TokenId kUnkId = 3;

struct ModelConfig {
    std::size_t vocab_size = 64;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t n_enc_layers = 2;
    std::size_t n_dec_layers = 2;
    std::size_t d_ff = 256;
    std::size_t max_seq_len = 128;

    void validate() const;  // throws ConfigError
    bool operator==(const ModelConfig&) const = default;
};

enum class Stack { kEncoder, kDecoder };

// Projection and activation sites. The cross_* kinds exist only in decoder
// layers and address the encoder-decoder attention block.
enum class SiteKind {
    kQ, kK, kV, kO,
    kCrossQ, kCrossK, kCrossV, kCrossO,
    kFfnIn, kFfnOut,
    kActK, kActV, kActFfn,
    kCrossActK, kCrossActV,
};

std::string to_string(Stack s);
std::string to_string(SiteKind k);
SiteKind parse_site_kind(const std::string& s);  // throws DataError
bool is_activation_kind(SiteKind k);
bool is_cross_kind(SiteKind k);
// Maps a cross kind to its self-attention counterpart (identity otherwise).
SiteKind base_kind(SiteKind k);

struct SiteId {
    Stack stack = Stack::kEncoder;
    std::size_t layer = 0;
    SiteKind kind = SiteKind::kQ;

    std::string str() const;  // e.g. "decoder.1.cross_q"
    static SiteId parse(const std::string& s);
    auto operator<=>(const SiteId&) const = default;
};

struct AttentionWeights {
    Tensor q, k, v, o;  // each [d_model x d_model]
};

struct EncoderLayer {
    Tensor attn_norm;
    AttentionWeights self_attn;
    Tensor ffn_norm;
    Tensor ffn_in;   // [d_model x d_ff]
    Tensor ffn_out;  // [d_ff x d_model]
};

struct DecoderLayer {
    Tensor self_norm;
    AttentionWeights self_attn;
    Tensor cross_norm;
    AttentionWeights cross_attn;
    Tensor ffn_norm;
    Tensor ffn_in;
    Tensor ffn_out;
};

// Frozen base weights. The token embedding is shared by both stacks and
// tied to the output projection.
struct ModelParams {
    ModelConfig config;
    Tensor embedding;      // [vocab x d_model]
    Tensor enc_positions;  // [max_seq_len x d_model]
    Tensor dec_positions;  // [max_seq_len x d_model]
    std::vector<EncoderLayer> encoder;
    std::vector<DecoderLayer> decoder;
    Tensor enc_final_norm;
    Tensor dec_final_norm;

    // Every parameter with its stable name. Weight matrices at adapter sites
    // are named by SiteId::str(); the rest by role ("embedding",
    // "encoder.0.attn_norm", ...). Order is fixed.
    std::vector<std::pair<std::string, Tensor>> named() const;
    std::size_t parameter_count() const;

    // Base weight behind a projection site; throws UsageError for
    // activation sites.
    Tensor site_weight(const SiteId& site) const;

    ModelParams clone() const;
    void set_requires_grad(bool flag) const;
};

// Xavier-uniform matrices, unit norm gains.
ModelParams init_model(const ModelConfig& config, std::uint64_t seed);
// All values zero, including gains.
ModelParams zero_model(const ModelConfig& config);

struct ForwardContext {
    bool training = false;       // enables adapter dropout
    std::mt19937_64* rng = nullptr;
};

// Hook points for sparse adapters. The model routes every projection and
// scaled activation through these.
class AdapterHooks {
public:
    virtual ~AdapterHooks() = default;
    // x . w0, plus any weight-space update registered at `site`.
    virtual Tensor project(Tape& tape, const SiteId& site, const Tensor& x, const Tensor& w0,
                           const ForwardContext& ctx) const = 0;
    // h, scaled by any activation vector registered at `site`.
    virtual Tensor scale_activation(Tape& tape, const SiteId& site, const Tensor& h) const = 0;
};

// Bidirectional encoder. kPadId tokens are masked out as attention keys.
// Throws LengthError when input_ids exceeds max_seq_len.
Tensor encode(Tape& tape, const ModelParams& params, const AdapterHooks* adapters,
              std::span<const TokenId> input_ids, const ForwardContext& ctx = {});

// Teacher-forced decoder logits [target_ids.size() x vocab]. The decoder
// input is target_ids shifted right behind kBosId (id 0 in vocabularies too
// small to hold it).
Tensor forward_logits(Tape& tape, const ModelParams& params, const AdapterHooks* adapters,
                      std::span<const TokenId> input_ids, std::span<const TokenId> target_ids,
                      const ForwardContext& ctx = {});

// Decoder logits for an explicit decoder input (already starting with BOS).
Tensor decode(Tape& tape, const ModelParams& params, const AdapterHooks* adapters,
              const Tensor& encoded, std::span<const TokenId> input_ids,
              std::span<const TokenId> decoder_input, const ForwardContext& ctx = {});

// Sum over t of log p(y_t | y_<t, x).
double log_likelihood(const ModelParams& params, const AdapterHooks* adapters,
                      std::span<const TokenId> input_ids, std::span<const TokenId> target_ids);

// Row-wise log-softmax of a logits matrix.
std::vector<double> log_softmax_rows(const Tensor& logits);

// Appends the argmax token (lowest id on ties) until eos or max_new tokens.
// The returned list includes eos when it was produced.
std::vector<TokenId> greedy_generate(const ModelParams& params, const AdapterHooks* adapters,
                                     std::span<const TokenId> input_ids, std::size_t max_new,
                                     TokenId eos = kEosId);

}  // namespace peftlab
