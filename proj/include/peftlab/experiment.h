#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "peftlab/adapters.h"
#include "peftlab/eval_report.h"
#include "peftlab/icu_tasks.h"
#include "peftlab/model.h"
#include "peftlab/trainer.h"

namespace peftlab {

// Environment variable that overrides ExperimentConfig::output_dir.
inline constexpr const char* kOutputRootEnv = "PEFTLAB_OUT";

struct CohortSizes {
    std::size_t train = 512;
    std::size_t test = 128;
    std::size_t shot_pool = 64;  // exemplars are drawn from here
};

// How the frozen base is produced. "trained" fits every base weight on
// 0-shot note generation; "random" keeps the Xavier init.
struct BaseConfig {
    bool trained = true;
    std::size_t examples = 6000;
    std::size_t epochs = 18;
    double learning_rate = 1e-3;
    std::size_t batch_size = 16;
    std::uint64_t seed = 5;
};

// The regularizer weight is train.lambda, or adapter.lambda when that is 0.
// validate() rejects two different nonzero values.
struct ExperimentConfig {
    std::string name;  // config directory; derived from the adapter label when empty
    ModelConfig model;  // vocab_size is replaced by the built vocabulary
    AdapterConfig adapter;
    TrainConfig train;
    std::vector<Task> tasks{Task::kSepsis, Task::kMortality, Task::kNote};
    CohortSizes cohort;
    std::size_t shots = kDefaultShots;
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    std::uint64_t data_seed = 0;
    BaseConfig base;
    std::filesystem::path output_dir = "out";

    void validate() const;  // throws ConfigError
    std::string slug() const;
    // output_dir, unless kOutputRootEnv is set.
    std::filesystem::path output_root() const;
    std::filesystem::path run_dir() const;  // <root>/<method>/<slug>
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);  // throws ConfigError
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// "Rank=8" -> "rank-8", "Budget=0.5, Init Rank=8" -> "budget-0.5-init-rank-8".
std::string slugify(const std::string& label);

struct TaskData {
    Task task = Task::kSepsis;
    std::vector<LabeledExample> train, test, pool;
};

// Every cohort the experiment touches. Each split is its own class-balanced
// cohort. The vocabulary covers all three tasks and the base corpus, so one
// base serves every task and adapter config.
struct ExperimentData {
    Vocabulary vocab;
    std::vector<TaskData> tasks;  // sepsis, mortality, note
    std::vector<LabeledExample> base_corpus;

    const TaskData& task(Task t) const;
};

ExperimentData build_experiment_data(const ExperimentConfig& c);

// The model config with vocab_size taken from `data`.
ModelConfig resolved_model_config(const ExperimentConfig& c, const ExperimentData& data);

// Loads the cached base for this (model, base, data) combination from
// <root>/base/<key>/base.json or trains and caches it. One base is shared
// by every seed and adapter config.
ModelParams obtain_base(const ExperimentConfig& c, const ExperimentData& data, std::ostream* log = nullptr);
std::filesystem::path base_cache_path(const ExperimentConfig& c, const ExperimentData& data);

// Per-seed exemplars, used identically at train and eval time.
std::vector<LabeledExample> seed_shots(const TaskData& data, std::size_t k, std::uint64_t seed);

// Task score on the 0-100 scale: accuracy for yes/no tasks, mean note
// overlap for notes. Decoding is greedy.
double evaluate_task(const ModelParams& params, const AdapterHooks* adapters, const Vocabulary& vocab,
                     Task task, std::span<const LabeledExample> examples,
                     std::span<const LabeledExample> shots, std::size_t k);

struct SeedResult {
    std::uint64_t seed = 0;
    std::vector<std::pair<Task, TrainReport>> reports;
};

// Trains every (seed, task) and writes
//   <run_dir>/experiment.json
//   <run_dir>/<seed>/<task>/adapters.json, train_report.json
// Throws TrainingError when a loss goes non-finite.
std::vector<SeedResult> run_training(const ExperimentConfig& c, std::ostream* log = nullptr);

// Evaluates every trained seed under a config directory, or one seed
// directory, writing <seed>/metrics.json. Returns the seed directories
// evaluated. Throws DataError when a checkpoint is missing.
std::vector<std::filesystem::path> run_evaluation(const std::filesystem::path& dir, std::ostream* log = nullptr);

// Aggregates evaluated runs into report rows. Each path is a config
// directory or a root searched recursively for them. Rows are ordered by
// method, then trainable fraction, then directory name, independent of the
// order of `paths` or of filesystem iteration.
std::vector<RunRow> collect_rows(const std::vector<std::filesystem::path>& paths);

}  // namespace peftlab
