#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "peftlab/experiment.h"

namespace fs = std::filesystem;

namespace peftlab {
namespace {

struct CliResult {
    int code = -1;
    std::string out;
};

CliResult run_cli(const std::string& args) {
    const std::string cmd = std::string("env -u ") + kOutputRootEnv + " '" PEFTLAB_CLI "' " + args + " 2>/dev/null";
    CliResult r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (!pipe) return r;
    std::array<char, 4096> buf{};
    std::size_t n;
    while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
    const int status = ::pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() / ("peftlab_cli_" + std::to_string(::getpid()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }
    fs::path dir_;
};

TEST_F(CliTest, UsageErrorsExitTwo) {
    EXPECT_EQ(run_cli("").code, 2);
    EXPECT_EQ(run_cli("bogus").code, 2);
    EXPECT_EQ(run_cli("gen-data --n 3").code, 2);
    EXPECT_EQ(run_cli("gen-data --task triage --n 3 --out " + (dir_ / "x.jsonl").string()).code, 2);
    EXPECT_EQ(run_cli("train --config " + (dir_ / "missing.json").string()).code, 2);
    EXPECT_EQ(run_cli("report --runs " + dir_.string() + " --format html").code, 2);
    EXPECT_EQ(run_cli("--help").code, 0);
}

TEST_F(CliTest, GenDataIsDeterministic) {
    const fs::path a = dir_ / "a.jsonl", b = dir_ / "b.jsonl";
    ASSERT_EQ(run_cli("gen-data --task sepsis --n 25 --seed 4 --out " + a.string()).code, 0);
    ASSERT_EQ(run_cli("gen-data --task sepsis --n 25 --seed 4 --out " + b.string()).code, 0);
    const std::string text = slurp(a);
    EXPECT_EQ(text, slurp(b));
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 25);
    EXPECT_TRUE(fs::exists(dir_ / "a.vocab.json"));
    ASSERT_EQ(run_cli("gen-data --task sepsis --n 25 --seed 5 --out " + b.string()).code, 0);
    EXPECT_NE(text, slurp(b));
    EXPECT_EQ(run_cli("gen-data --task note --n 0 --out " + a.string()).code, 2);
}

TEST_F(CliTest, GradcheckPassesAndCatchesCorruption) {
    const CliResult ok = run_cli("gradcheck --seed 1");
    EXPECT_EQ(ok.code, 0);
    EXPECT_NE(ok.out.find("all "), std::string::npos);
    const CliResult bad = run_cli("gradcheck --seed 1 --corrupt lora.B");
    EXPECT_EQ(bad.code, 1);
    EXPECT_NE(bad.out.find("failed: lora.B"), std::string::npos);
    EXPECT_EQ(run_cli("gradcheck --corrupt nope").code, 2);
}

TEST_F(CliTest, TrainEvalReport) {
    ExperimentConfig c;
    c.model.d_model = 8;
    c.model.n_heads = 2;
    c.model.n_enc_layers = 1;
    c.model.n_dec_layers = 1;
    c.model.d_ff = 16;
    c.model.max_seq_len = 160;
    c.adapter = AdapterConfig::adalora(2, 0.5);
    c.train.epochs = 2;
    c.train.batch_size = 4;
    c.cohort = {8, 4, 4};
    c.shots = 2;
    c.seeds = {0, 1};
    c.base.examples = 16;
    c.base.epochs = 1;
    c.output_dir = dir_ / "runs";
    const fs::path cfg = dir_ / "exp.json";
    std::ofstream(cfg) << to_json(c).dump(2);

    ASSERT_EQ(run_cli("train --config " + cfg.string()).code, 0);
    EXPECT_EQ(run_cli("report --runs " + c.output_dir.string()).code, 1);
    const CliResult ev = run_cli("eval --run-dir " + c.run_dir().string());
    ASSERT_EQ(ev.code, 0);
    EXPECT_NE(ev.out.find("metrics.json"), std::string::npos);

    const CliResult md = run_cli("report --runs " + c.output_dir.string());
    ASSERT_EQ(md.code, 0);
    EXPECT_NE(md.out.find("| AdaLoRA | Budget=0.5, Init Rank=2 |"), std::string::npos);
    const fs::path csv = dir_ / "table.csv";
    ASSERT_EQ(run_cli("report --format csv --runs " + c.run_dir().string() + " --out " + csv.string()).code, 0);
    EXPECT_NE(slurp(csv).find("AdaLoRA,\"Budget=0.5, Init Rank=2\""), std::string::npos);
    EXPECT_EQ(run_cli("eval --run-dir " + (dir_ / "nothing").string()).code, 1);
}

}  // namespace
}  // namespace peftlab
