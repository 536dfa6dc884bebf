#include "peftlab/trainer.h"

#include <chrono>
#include <cmath>
#include <random>

#include "peftlab/errors.h"

namespace peftlab {

using nlohmann::json;

namespace {

std::vector<std::size_t> shuffled_indices(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i-- > 1;) std::swap(order[i], order[rng() % (i + 1)]);
    return order;
}

void ensure_grads(std::span<const TrainableTensor> params) {
    for (const auto& p : params) {
        Tensor t = p.tensor;
        t.mutable_grad();
    }
}

void clip_gradients(std::span<const TrainableTensor> params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        for (double g : p.tensor.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0.0) return;
    const double f = max_norm / norm;
    for (const auto& p : params) {
        Tensor t = p.tensor;
        for (double& g : t.mutable_grad()) g *= f;
    }
}

struct BatchResult {
    double task = 0.0;
    double reg = 0.0;
};

// Forward and backward for one batch; gradients accumulate on the leaves.
BatchResult run_batch(const ModelParams& params, const AdapterSet* adapters,
                      std::span<const EncodedExample> data, std::span<const std::size_t> batch,
                      double lambda, std::mt19937_64& dropout_rng) {
    std::size_t n_tokens = 0;
    for (std::size_t i : batch) n_tokens += data[i].target.size();
    BatchResult r;
    const ForwardContext ctx{true, &dropout_rng};
    for (std::size_t i : batch) {
        const auto& ex = data[i];
        Tape tape;
        Tensor logits = forward_logits(tape, params, adapters, ex.input, ex.target, ctx);
        Tensor ce = cross_entropy(tape, logits, ex.target, kPadId);
        const double w = static_cast<double>(ex.target.size()) / static_cast<double>(n_tokens);
        r.task += w * ce.item();
        if (!std::isfinite(r.task)) return r;
        tape.backward(scale(tape, ce, w));
    }
    if (adapters) {
        Tape tape;
        Tensor reg = regularizer(tape, *adapters);
        r.reg = reg.item();
        if (lambda > 0.0 && reg.requires_grad()) tape.backward(scale(tape, reg, lambda));
    }
    return r;
}

}  // namespace

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (lambda < 0.0 || !std::isfinite(lambda)) throw ConfigError("lambda must be a finite value >= 0");
    if (prune_at && (*prune_at < 1 || *prune_at > epochs)) {
        throw ConfigError("prune_at must lie in 1.." + std::to_string(epochs));
    }
    if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("grad_clip must be > 0");
}

std::size_t TrainConfig::effective_prune_at() const { return prune_at ? *prune_at : (epochs + 1) / 2; }

void adamw_step(OptimizerState& state, std::span<const TrainableTensor> params, double lr) {
    if (state.m.empty() && state.step == 0) {
        for (const auto& p : params) {
            state.m.emplace_back(p.tensor.numel(), 0.0);
            state.v.emplace_back(p.tensor.numel(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw UsageError("adamw_step: parameter list changed between steps");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.m[i].size() != params[i].tensor.numel()) {
            throw UsageError("adamw_step: '" + params[i].name + "' changed size between steps");
        }
        if (!params[i].tensor.has_grad()) throw UsageError("adamw_step: '" + params[i].name + "' has no gradient");
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor t = params[i].tensor;
        auto p = t.mutable_values();
        auto g = t.grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        const auto& frozen = params[i].frozen;
        for (std::size_t j = 0; j < p.size(); ++j) {
            if (!frozen.empty() && frozen[j]) continue;
            p[j] *= 1.0 - lr * state.weight_decay;
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + state.eps);
        }
        t.zero_grad();
    }
}

Tensor total_loss(Tape& tape, const Tensor& task_loss, const AdapterSet& adapters, double lambda) {
    if (lambda == 0.0) return task_loss;
    Tensor reg = regularizer(tape, adapters);
    return add(tape, task_loss, scale(tape, reg, lambda));
}

std::vector<EncodedExample> encode_examples(std::span<const LabeledExample> examples,
                                            const Vocabulary& vocab,
                                            std::span<const LabeledExample> shots, std::size_t k,
                                            std::size_t max_len) {
    std::vector<EncodedExample> out;
    out.reserve(examples.size());
    for (const auto& ex : examples) {
        EncodedExample e;
        e.input = tokenize(few_shot_assemble(shots, ex.prompt_text, k), vocab);
        e.target = tokenize(ex.target_text, vocab);
        e.target.push_back(kEosId);
        if (e.input.size() > max_len || e.target.size() > max_len) {
            throw LengthError("encoded example of " + std::to_string(e.input.size()) + " input / " +
                              std::to_string(e.target.size()) + " target tokens exceeds max_seq_len " +
                              std::to_string(max_len));
        }
        out.push_back(std::move(e));
    }
    return out;
}

TrainReport train(const ModelParams& params, AdapterSet& adapters, std::span<const EncodedExample> data,
                  const TrainConfig& cfg, const EpochCallback& on_epoch) {
    cfg.validate();
    if (data.empty()) throw DataError("train: no training examples");
    if (adapters.empty()) throw UsageError("train: adapter set is empty");
    const auto start = std::chrono::steady_clock::now();
    params.set_requires_grad(false);

    std::mt19937_64 order_rng(cfg.seed);
    std::mt19937_64 dropout_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
    OptimizerState opt;
    TrainReport report;
    const bool ada = adapters.method() == AdapterMethod::kAdaLora;
    std::vector<TrainableTensor> trainables = adapters.trainable();

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto order = shuffled_indices(data.size(), order_rng);
        double sum_total = 0.0, sum_task = 0.0, sum_reg = 0.0;
        std::size_t n_batches = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
            const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
            ensure_grads(trainables);
            const std::span<const std::size_t> batch(order.data() + b0, b1 - b0);
            const BatchResult r = run_batch(params, &adapters, data, batch, cfg.lambda, dropout_rng);
            const double total = r.task + cfg.lambda * r.reg;
            if (!std::isfinite(total)) {
                throw TrainingError("non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(n_batches));
            }
            if (cfg.grad_clip) clip_gradients(trainables, *cfg.grad_clip);
            adamw_step(opt, trainables, cfg.learning_rate);
            sum_total += total;
            sum_task += r.task;
            sum_reg += r.reg;
            ++n_batches;
        }
        const double nb = static_cast<double>(n_batches);
        report.total_loss.push_back(sum_total / nb);
        report.task_loss.push_back(sum_task / nb);
        report.regularizer.push_back(sum_reg / nb);
        if (ada && epoch == cfg.effective_prune_at()) {
            prune_ranks_in_place(adapters);
            trainables = adapters.trainable();
            report.pruned_after_epoch = epoch;
        }
        if (on_epoch) on_epoch(epoch, report.total_loss.back());
    }
    report.trainable_fraction = trainable_fraction(adapters, params);
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

std::vector<double> base_train(ModelParams& params, std::span<const EncodedExample> data,
                               const TrainConfig& cfg, const EpochCallback& on_epoch) {
    cfg.validate();
    if (data.empty()) throw DataError("base_train: no training examples");
    std::vector<TrainableTensor> trainables;
    for (auto& [name, t] : params.named()) trainables.push_back({name, t, {}});
    params.set_requires_grad(true);

    std::mt19937_64 order_rng(cfg.seed);
    std::mt19937_64 dropout_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
    OptimizerState opt;
    std::vector<double> losses;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto order = shuffled_indices(data.size(), order_rng);
        double sum = 0.0;
        std::size_t n_batches = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
            const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
            ensure_grads(trainables);
            const std::span<const std::size_t> batch(order.data() + b0, b1 - b0);
            const BatchResult r = run_batch(params, nullptr, data, batch, 0.0, dropout_rng);
            if (!std::isfinite(r.task)) {
                params.set_requires_grad(false);
                throw TrainingError("non-finite loss in base training epoch " + std::to_string(epoch) +
                                    ", batch " + std::to_string(n_batches));
            }
            if (cfg.grad_clip) clip_gradients(trainables, *cfg.grad_clip);
            adamw_step(opt, trainables, cfg.learning_rate);
            sum += r.task;
            ++n_batches;
        }
        losses.push_back(sum / static_cast<double>(n_batches));
        if (on_epoch) on_epoch(epoch, losses.back());
    }
    params.set_requires_grad(false);
    for (auto& p : trainables) p.tensor.clear_grad();
    return losses;
}

json to_json(const TrainConfig& c) {
    json j{{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"epochs", c.epochs},
           {"lambda", c.lambda},               {"seed", c.seed}};
    j["prune_at"] = c.prune_at ? json(*c.prune_at) : json(nullptr);
    j["grad_clip"] = c.grad_clip ? json(*c.grad_clip) : json(nullptr);
    return j;
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    try {
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.epochs = j.value("epochs", c.epochs);
        c.lambda = j.value("lambda", c.lambda);
        c.seed = j.value("seed", c.seed);
        if (j.contains("prune_at") && !j.at("prune_at").is_null()) c.prune_at = j.at("prune_at").get<std::size_t>();
        if (j.contains("grad_clip") && !j.at("grad_clip").is_null()) c.grad_clip = j.at("grad_clip").get<double>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
}

json to_json(const TrainReport& r) {
    json j{{"total_loss", r.total_loss},
           {"task_loss", r.task_loss},
           {"regularizer", r.regularizer},
           {"trainable_fraction", r.trainable_fraction},
           {"wall_seconds", r.wall_seconds}};
    j["pruned_after_epoch"] = r.pruned_after_epoch ? json(*r.pruned_after_epoch) : json(nullptr);
    return j;
}

TrainReport train_report_from_json(const json& j) {
    try {
        TrainReport r;
        r.total_loss = j.at("total_loss").get<std::vector<double>>();
        r.task_loss = j.at("task_loss").get<std::vector<double>>();
        r.regularizer = j.at("regularizer").get<std::vector<double>>();
        r.trainable_fraction = j.at("trainable_fraction").get<double>();
        r.wall_seconds = j.at("wall_seconds").get<double>();
        if (!j.at("pruned_after_epoch").is_null()) r.pruned_after_epoch = j.at("pruned_after_epoch").get<std::size_t>();
        return r;
    } catch (const json::exception& e) {
        throw DataError(std::string("train report: ") + e.what());
    }
}

}  // namespace peftlab
