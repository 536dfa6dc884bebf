#include <gtest/gtest.h>

#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>

#include "peftlab/checkpoint.h"
#include "peftlab/errors.h"
#include "peftlab/experiment.h"

namespace fs = std::filesystem;

namespace peftlab {
namespace {

class TempDir {
public:
    TempDir() {
        path_ = fs::temp_directory_path() / ("peftlab_exp_" + std::to_string(::getpid()) + "_" + std::to_string(counter_++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

private:
    static inline int counter_ = 0;
    fs::path path_;
};

ExperimentConfig tiny_experiment(const fs::path& root, AdapterConfig adapter) {
    ExperimentConfig c;
    c.model.d_model = 8;
    c.model.n_heads = 2;
    c.model.n_enc_layers = 1;
    c.model.n_dec_layers = 1;
    c.model.d_ff = 16;
    c.model.max_seq_len = 160;
    c.adapter = std::move(adapter);
    c.train.learning_rate = 1e-2;
    c.train.batch_size = 4;
    c.train.epochs = 2;
    c.cohort = {8, 4, 4};
    c.shots = 2;
    c.seeds = {0, 1};
    c.base.examples = 16;
    c.base.epochs = 1;
    c.output_dir = root;
    return c;
}

class ExperimentTest : public ::testing::Test {
protected:
    void SetUp() override { ::unsetenv(kOutputRootEnv); }
};

TEST_F(ExperimentTest, SlugifyLabels) {
    EXPECT_EQ(slugify("Rank=8"), "rank-8");
    EXPECT_EQ(slugify("Budget=0.5, Init Rank=8"), "budget-0.5-init-rank-8");
    EXPECT_EQ(slugify("Reduced Scope (Last 6)"), "reduced-scope-last-6");
    EXPECT_EQ(slugify("Rank=16, Drop=0.1"), "rank-16-drop-0.1");
}

TEST_F(ExperimentTest, ConfigJsonRoundTrip) {
    ExperimentConfig c = tiny_experiment("runs", AdapterConfig::adalora(4, 0.5, 0.01));
    c.tasks = {Task::kNote, Task::kSepsis};
    c.base.trained = false;
    const ExperimentConfig d = experiment_config_from_json(to_json(c));
    EXPECT_EQ(to_json(d), to_json(c));
    EXPECT_EQ(d.run_dir(), fs::path("runs") / "adalora" / "budget-0.5-init-rank-4");
}

TEST_F(ExperimentTest, ConfigRejectsBadInput) {
    nlohmann::json j = to_json(tiny_experiment("x", AdapterConfig::lora(2)));
    j["typo"] = 1;
    EXPECT_THROW(experiment_config_from_json(j), ConfigError);
    nlohmann::json no_adapter = to_json(tiny_experiment("x", AdapterConfig::lora(2)));
    no_adapter.erase("adapter");
    EXPECT_THROW(experiment_config_from_json(no_adapter), ConfigError);
    nlohmann::json bad_task = to_json(tiny_experiment("x", AdapterConfig::lora(2)));
    bad_task["tasks"] = {"triage"};
    EXPECT_THROW(experiment_config_from_json(bad_task), ConfigError);

    ExperimentConfig c = tiny_experiment("x", AdapterConfig::lora(2));
    c.shots = 5;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny_experiment("x", AdapterConfig::lora(2));
    c.seeds.clear();
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny_experiment("x", AdapterConfig::lora(2));
    c.name = "base";
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny_experiment("x", AdapterConfig::adalora(2, 0.5, 0.01));
    c.train.lambda = 0.02;
    EXPECT_THROW(c.validate(), ConfigError);
    c.train.lambda = 0.01;
    EXPECT_NO_THROW(c.validate());

    TempDir tmp;
    EXPECT_THROW(load_experiment_config(tmp.path() / "missing.json"), ConfigError);
    std::ofstream(tmp.path() / "broken.json") << "{ not json";
    EXPECT_THROW(load_experiment_config(tmp.path() / "broken.json"), ConfigError);
}

TEST_F(ExperimentTest, ShippedConfigsLoad) {
    std::set<std::string> dirs;
    for (const auto& e : fs::directory_iterator(fs::path(PEFTLAB_SOURCE_DIR) / "configs")) {
        const ExperimentConfig c = load_experiment_config(e.path());
        EXPECT_NO_THROW(c.validate()) << e.path();
        EXPECT_EQ(c.shots, 16u);
        EXPECT_EQ(c.seeds.size(), 5u);
        EXPECT_EQ(e.path().stem().string(), to_string(c.adapter.method) + "-" + c.slug());
        dirs.insert(c.run_dir().string());
    }
    EXPECT_EQ(dirs.size(), 8u);
}

TEST_F(ExperimentTest, OutputRootEnvOverride) {
    const ExperimentConfig c = tiny_experiment("configured", AdapterConfig::ia3());
    EXPECT_EQ(c.output_root(), fs::path("configured"));
    ::setenv(kOutputRootEnv, "/tmp/elsewhere", 1);
    EXPECT_EQ(c.output_root(), fs::path("/tmp/elsewhere"));
    EXPECT_EQ(c.run_dir(), fs::path("/tmp/elsewhere") / "ia3" / "default-all-layers");
    ::unsetenv(kOutputRootEnv);
}

TEST_F(ExperimentTest, DataIsDeterministicBalancedAndCovered) {
    const ExperimentConfig c = tiny_experiment("x", AdapterConfig::lora(2));
    const ExperimentData a = build_experiment_data(c), b = build_experiment_data(c);
    EXPECT_EQ(a.vocab.ids(), b.vocab.ids());
    ASSERT_EQ(a.tasks.size(), 3u);
    for (const auto& td : a.tasks) {
        EXPECT_EQ(td.train.size(), 8u);
        EXPECT_EQ(td.test.size(), 4u);
        EXPECT_EQ(td.pool.size(), 4u);
        EXPECT_EQ(to_jsonl(td.test), to_jsonl(b.task(td.task).test));
        EXPECT_NE(to_jsonl(td.train), to_jsonl(td.test));
        for (const auto* split : {&td.train, &td.test, &td.pool}) {
            for (const auto& ex : *split) {
                for (TokenId id : tokenize(ex.prompt_text + " " + ex.target_text, a.vocab)) EXPECT_NE(id, kUnkId);
            }
        }
    }
    EXPECT_EQ(a.base_corpus.size(), 16u);
    EXPECT_EQ(resolved_model_config(c, a).vocab_size, a.vocab.size());
    EXPECT_EQ(seed_shots(a.task(Task::kSepsis), 2, 3), seed_shots(a.task(Task::kSepsis), 2, 3));
}

TEST_F(ExperimentTest, BaseIsCachedAndReused) {
    TempDir tmp;
    const ExperimentConfig c = tiny_experiment(tmp.path(), AdapterConfig::lora(2));
    const ExperimentData data = build_experiment_data(c);
    const ModelParams first = obtain_base(c, data);
    const fs::path cache = base_cache_path(c, data);
    ASSERT_TRUE(fs::exists(cache));
    const auto stamp = fs::last_write_time(cache);
    const ModelParams second = obtain_base(c, data);
    EXPECT_EQ(serialize_model(first), serialize_model(second));
    EXPECT_EQ(fs::last_write_time(cache), stamp);

    // A random base must not share the trained base's cache entry.
    ExperimentConfig r = c;
    r.base.trained = false;
    EXPECT_NE(base_cache_path(r, data), cache);
}

TEST_F(ExperimentTest, TrainEvalReportEndToEnd) {
    TempDir tmp;
    const ExperimentConfig lora = tiny_experiment(tmp.path(), AdapterConfig::lora(2));
    const ExperimentConfig ia3 = tiny_experiment(tmp.path(), AdapterConfig::ia3());

    const auto results = run_training(lora);
    ASSERT_EQ(results.size(), 2u);
    const ExperimentData data = build_experiment_data(lora);
    const fs::path base_file = base_cache_path(lora, data);
    const std::string base_bytes = read_text_file(base_file);
    run_training(ia3);
    EXPECT_EQ(read_text_file(base_file), base_bytes);

    for (const auto seed : {"0", "1"}) {
        for (const auto task : {"sepsis", "mortality", "note"}) {
            EXPECT_TRUE(fs::exists(lora.run_dir() / seed / task / "adapters.json"));
            EXPECT_TRUE(fs::exists(lora.run_dir() / seed / task / "train_report.json"));
        }
    }
    EXPECT_TRUE(fs::exists(lora.run_dir() / "experiment.json"));

    EXPECT_THROW(collect_rows({lora.run_dir()}), DataError);
    EXPECT_EQ(run_evaluation(lora.run_dir()).size(), 2u);
    EXPECT_EQ(run_evaluation(ia3.run_dir() / "0").size(), 1u);
    EXPECT_EQ(run_evaluation(ia3.run_dir() / "1").size(), 1u);

    const auto rows = collect_rows({tmp.path()});
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].method, "LoRA");
    EXPECT_EQ(rows[1].method, "(IA)3");
    for (const auto& r : rows) {
        EXPECT_EQ(r.sepsis_acc.n_seeds, 2u);
        EXPECT_EQ(r.note_score.n_seeds, 2u);
        EXPECT_GE(r.sepsis_acc.mean, 0.0);
        EXPECT_LE(r.sepsis_acc.mean, 100.0);
        EXPECT_FALSE(std::isnan(r.avg));
    }

    const std::string md = emit_report(rows, ReportFormat::kMarkdown);
    EXPECT_EQ(emit_report(collect_rows({ia3.run_dir(), lora.run_dir()}), ReportFormat::kMarkdown), md);
    EXPECT_EQ(emit_report(collect_rows({lora.run_dir(), ia3.run_dir(), tmp.path()}), ReportFormat::kMarkdown), md);

    // A fresh adapter set scores exactly like the bare base.
    const ModelParams base = deserialize_model(base_bytes);
    const AdapterSet fresh = init_adapters(lora.adapter, base.config, 0);
    const TaskData& sep = data.task(Task::kSepsis);
    const auto shots = seed_shots(sep, lora.shots, 0);
    EXPECT_EQ(evaluate_task(base, &fresh, data.vocab, Task::kSepsis, sep.test, shots, lora.shots),
              evaluate_task(base, nullptr, data.vocab, Task::kSepsis, sep.test, shots, lora.shots));
}

TEST_F(ExperimentTest, AdapterLambdaReachesTheTrainer) {
    TempDir tmp;
    ExperimentConfig c = tiny_experiment(tmp.path(), AdapterConfig::adalora(2, 0.5, 0.01));
    c.tasks = {Task::kSepsis};
    c.seeds = {0};
    const TrainReport r = run_training(c).at(0).reports.at(0).second;
    EXPECT_GT(r.regularizer.at(0), 0.0);
    EXPECT_NEAR(r.total_loss.at(0), r.task_loss.at(0) + 0.01 * r.regularizer.at(0), 1e-12);
}

TEST_F(ExperimentTest, EvaluationNeedsCheckpoints) {
    TempDir tmp;
    EXPECT_THROW(run_evaluation(tmp.path()), DataError);
    ExperimentConfig c = tiny_experiment(tmp.path(), AdapterConfig::lora(2));
    c.tasks = {Task::kSepsis};
    c.seeds = {0};
    run_training(c);
    fs::remove(c.run_dir() / "0" / "sepsis" / "adapters.json");
    EXPECT_THROW(run_evaluation(c.run_dir()), DataError);
}

TEST_F(ExperimentTest, MissingTaskIsReportedAsNa) {
    TempDir tmp;
    ExperimentConfig c = tiny_experiment(tmp.path(), AdapterConfig::lora(2));
    c.tasks = {Task::kSepsis};
    c.seeds = {3};
    run_training(c);
    run_evaluation(c.run_dir());
    const auto rows = collect_rows({c.run_dir()});
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(rows[0].sepsis_acc.n_seeds, 1u);
    EXPECT_EQ(rows[0].mortality_acc.n_seeds, 0u);
    EXPECT_NE(emit_report(rows, ReportFormat::kMarkdown).find("n/a"), std::string::npos);
}

}  // namespace
}  // namespace peftlab
