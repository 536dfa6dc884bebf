#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "peftlab/model.h"

namespace peftlab {

enum class AdapterMethod { kLora, kAdaLora, kIa3 };

std::string to_string(AdapterMethod m);
AdapterMethod parse_adapter_method(const std::string& s);  // throws ConfigError

struct AdapterConfig {
    AdapterMethod method = AdapterMethod::kLora;
    std::size_t rank = 8;  // lora / adalora; initial rank for adalora
    // Site kinds to adapt. Self-attention kinds also select their
    // cross-attention counterpart in decoder layers (q -> q, cross_q).
    std::set<SiteKind> target_sites;
    // Restrict to the last n decoder layers; nullopt adapts every layer of
    // both stacks.
    std::optional<std::size_t> last_n;
    double lambda = 0.0;
    // Target retained-rank fraction for adalora. Values above 1 mean no
    // pruning (see effective_budget()).
    double budget = 1.0;
    double dropout = 0.0;

    static AdapterConfig lora(std::size_t rank, double dropout = 0.0);
    static AdapterConfig adalora(std::size_t rank, double budget, double lambda = 0.0);
    static AdapterConfig ia3(std::optional<std::size_t> last_n = std::nullopt);
    static std::set<SiteKind> default_targets(AdapterMethod m);

    double effective_budget() const { return budget > 1.0 ? 1.0 : budget; }
    // Throws ConfigError.
    void validate(const ModelConfig& model) const;
    // "Rank=8", "Budget=0.5, Init Rank=4", "Default (All Layers)", ...
    std::string label() const;
};

// Low-rank update dW = A . B.
struct LoraSite {
    Tensor a;  // [d x r]
    Tensor b;  // [r x k]
};

// Scaled low-rank update dW = A . diag(alpha) . B. `keep` is a constant
// 0/1 vector; a pruned component has keep 0 and alpha 0.
struct AdaLoraSite {
    Tensor a;      // [d x r]
    Tensor alpha;  // [r]
    Tensor b;      // [r x k]
    Tensor keep;   // [r], constant
    bool pruned(std::size_t i) const { return keep.at(i) == 0.0; }
};

// Activation scaling h' = gamma (.) h.
struct Ia3Site {
    Tensor gamma;
};

using SiteState = std::variant<LoraSite, AdaLoraSite, Ia3Site>;

struct TrainableTensor {
    std::string name;  // "<site>.<a|b|alpha|gamma>"
    Tensor tensor;
    // Coordinates excluded from optimizer updates; empty when none are.
    std::vector<std::uint8_t> frozen;
};

// The trainable sparse parameters for one adaptation run.
class AdapterSet final : public AdapterHooks {
public:
    AdapterSet() = default;
    explicit AdapterSet(AdapterConfig config) : config_(std::move(config)) {}

    const AdapterConfig& config() const { return config_; }
    AdapterMethod method() const { return config_.method; }
    const std::map<SiteId, SiteState>& sites() const { return sites_; }
    std::map<SiteId, SiteState>& mutable_sites() { return sites_; }
    bool empty() const { return sites_.empty(); }

    Tensor project(Tape& tape, const SiteId& site, const Tensor& x, const Tensor& w0,
                   const ForwardContext& ctx) const override;
    Tensor scale_activation(Tape& tape, const SiteId& site, const Tensor& h) const override;

    std::vector<TrainableTensor> trainable() const;
    std::size_t trainable_count() const;
    void zero_grad() const;
    AdapterSet clone() const;

private:
    AdapterConfig config_;
    std::map<SiteId, SiteState> sites_;
};

// Sites the config selects on this architecture, in SiteId order.
std::vector<SiteId> enumerate_sites(const AdapterConfig& config, const ModelConfig& model);

// LoRA/AdaLoRA: A ~ N(0, 0.02^2), B = 0, alpha = 1. (IA)^3: gamma = 1.
AdapterSet init_adapters(const AdapterConfig& config, const ModelConfig& model, std::uint64_t seed);

// W0 + A.B or W0 + A.diag(alpha).B. Throws UsageError for (IA)^3 sites and
// DimensionError on shape disagreement.
Tensor effective_weight(const Tensor& w0, const SiteState& site);

// h (.) gamma, recorded on the tape so gamma receives a gradient.
Tensor scale_activation(Tape& tape, const Tensor& h, const Ia3Site& site);

// L1 norm of every alpha for adalora; constant 0 for the other methods.
Tensor regularizer(Tape& tape, const AdapterSet& adapters);

// Keeps the ceil(b * r_total) components with largest |alpha| across all
// sites and masks the rest. Throws UsageError unless method is adalora.
void prune_ranks_in_place(AdapterSet& adapters);
AdapterSet prune_ranks(const AdapterSet& adapters);
std::size_t retained_components(const AdapterSet& adapters);

// Folds the adapters into a new plain ModelParams whose adapter-free
// forward equals the adapted forward. `params` is not modified.
ModelParams merge(const AdapterSet& adapters, const ModelParams& params);

// Trainable adapter scalars over base-model scalars.
double trainable_fraction(const AdapterSet& adapters, const ModelParams& params);

}  // namespace peftlab
