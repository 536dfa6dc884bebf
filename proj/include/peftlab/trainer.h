#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "peftlab/adapters.h"
#include "peftlab/icu_tasks.h"
#include "peftlab/model.h"

namespace peftlab {

struct TrainConfig {
    double learning_rate = 5e-5;
    std::size_t batch_size = 16;
    std::size_t epochs = 1;
    double lambda = 0.0;
    std::uint64_t seed = 0;
    // 1-based epoch after which adalora ranks are pruned; ceil(E/2) when unset.
    std::optional<std::size_t> prune_at;
    // Global gradient-norm clip; off when unset.
    std::optional<double> grad_clip;

    void validate() const;  // throws ConfigError
    std::size_t effective_prune_at() const;
};

struct OptimizerState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::size_t step = 0;
    std::vector<std::vector<double>> m, v;  // one pair per trainable tensor
};

// One AdamW update over `params` (decoupled decay applied first), skipping
// frozen coordinates, then zeroes the gradients. Throws UsageError when a
// tensor has no gradient or the tensor list changed between steps.
void adamw_step(OptimizerState& state, std::span<const TrainableTensor> params, double lr);

// task_loss + lambda * regularizer(adapters), recorded on `tape`.
Tensor total_loss(Tape& tape, const Tensor& task_loss, const AdapterSet& adapters, double lambda);

struct TrainReport {
    std::vector<double> total_loss;   // per-epoch mean over batches
    std::vector<double> task_loss;
    std::vector<double> regularizer;
    double trainable_fraction = 0.0;
    double wall_seconds = 0.0;
    std::optional<std::size_t> pruned_after_epoch;
};

// A prompt/target pair in token ids. The target ends with kEosId.
struct EncodedExample {
    std::vector<TokenId> input;
    std::vector<TokenId> target;
};

// Builds the k-shot prompt for every example with the same exemplar list,
// then tokenizes. Throws LengthError when a prompt exceeds max_len.
std::vector<EncodedExample> encode_examples(std::span<const LabeledExample> examples,
                                            const Vocabulary& vocab,
                                            std::span<const LabeledExample> shots, std::size_t k,
                                            std::size_t max_len);

// Called after each epoch with its 1-based index and mean total loss.
using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

// Fine-tunes the adapters in place; `params` is never written. Each batch
// loss is the token-weighted mean cross-entropy plus lambda * R. Throws
// TrainingError on a non-finite loss.
TrainReport train(const ModelParams& params, AdapterSet& adapters,
                  std::span<const EncodedExample> data, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

// Trains every base parameter with no adapters attached (the frozen-base
// stand-in). Returns per-epoch mean task loss.
std::vector<double> base_train(ModelParams& params, std::span<const EncodedExample> data,
                               const TrainConfig& cfg, const EpochCallback& on_epoch = {});

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);  // throws ConfigError
nlohmann::json to_json(const TrainReport& r);
TrainReport train_report_from_json(const nlohmann::json& j);  // throws DataError

}  // namespace peftlab
