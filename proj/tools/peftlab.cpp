// peftlab: data generation, adapter training, evaluation, reporting and
// gradient checks. Exit codes: 0 success, 1 runtime failure, 2 usage or
// config error.
#include <malloc.h>

#include <CLI11.hpp>
#include <filesystem>
#include <iomanip>
#include <iostream>

#include "peftlab/checkpoint.h"
#include "peftlab/errors.h"
#include "peftlab/eval_report.h"
#include "peftlab/experiment.h"
#include "peftlab/gradcheck.h"
#include "peftlab/icu_tasks.h"

namespace fs = std::filesystem;
using namespace peftlab;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

fs::path default_root() {
    if (const char* env = std::getenv(kOutputRootEnv); env && *env) return env;
    return "out";
}

int gen_data(const std::string& task_name, std::size_t n, std::uint64_t seed, fs::path out) {
    const Task task = parse_task(task_name);
    if (n == 0) throw ConfigError("--n must be at least 1");
    if (out.empty()) {
        out = default_root() / "data" / (task_name + "-" + std::to_string(n) + "-" + std::to_string(seed) + ".jsonl");
    }
    const auto cohort = generate_cohort(task, n, seed);
    write_text_file(out, to_jsonl(cohort));
    fs::path vocab_path = out;
    vocab_path.replace_extension(".vocab.json");
    write_text_file(vocab_path, vocab_to_json(Vocabulary::build(cohort)));
    std::cout << cohort.size() << " records -> " << out.string() << "\n";
    return 0;
}

int train_cmd(const fs::path& config_path) {
    const ExperimentConfig cfg = load_experiment_config(config_path);
    run_training(cfg, &std::cerr);
    std::cout << "trained " << cfg.seeds.size() << " seed(s) -> " << cfg.run_dir().string() << "\n";
    return 0;
}

int eval_cmd(const fs::path& dir) {
    for (const auto& d : run_evaluation(dir, &std::cerr)) std::cout << (d / "metrics.json").string() << "\n";
    return 0;
}

int report_cmd(const std::vector<fs::path>& runs, const std::string& format_name, const fs::path& out) {
    const ReportFormat format = parse_report_format(format_name);
    const auto rows = collect_rows(runs);
    const std::string text = emit_report(rows, format);
    if (out.empty()) {
        std::cout << text;
    } else {
        write_text_file(out, text);
        std::cout << rows.size() << " rows -> " << out.string() << "\n";
    }
    return 0;
}

int gradcheck_cmd(std::uint64_t seed, const std::string& corrupt) {
    GradcheckOptions opt;
    opt.corrupt = corrupt;
    const auto results = run_gradcheck(seed, opt);
    std::vector<std::string> failed;
    for (const auto& r : results) {
        std::cout << std::left << std::setw(18) << r.name << " max_rel_err " << std::scientific
                  << std::setprecision(3) << r.max_rel_error << "  " << (r.passed ? "ok" : "FAIL") << "\n";
        if (!r.passed) failed.push_back(r.name);
    }
    if (failed.empty()) {
        std::cout << "all " << results.size() << " checks within " << opt.tolerance << "\n";
        return 0;
    }
    std::cout << "failed:";
    for (const auto& f : failed) std::cout << ' ' << f;
    std::cout << "\n";
    return kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
    // Training allocates and frees many mid-size buffers per step.
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);

    CLI::App app{"Sparse adapter fine-tuning lab on synthetic ICU tasks"};
    app.require_subcommand(1);

    std::string task;
    std::size_t n = 0;
    std::uint64_t data_seed = 0;
    fs::path data_out;
    auto* gen = app.add_subcommand("gen-data", "Write a synthetic cohort (JSONL) and its vocabulary");
    gen->add_option("--task", task, "sepsis, mortality or note")->required();
    gen->add_option("--n", n, "Number of records")->required();
    gen->add_option("--seed", data_seed, "Generator seed");
    gen->add_option("--out", data_out, "Output JSONL path");

    fs::path config_path;
    auto* train = app.add_subcommand("train", "Train adapters for every seed and task of an experiment");
    train->add_option("--config", config_path, "Experiment JSON")->required();

    fs::path run_dir;
    auto* eval = app.add_subcommand("eval", "Score trained adapters on the test cohorts");
    eval->add_option("--run-dir", run_dir, "Config or seed directory")->required();

    std::vector<fs::path> runs;
    std::string format = "markdown";
    fs::path report_out;
    auto* report = app.add_subcommand("report", "Aggregate evaluated runs into a table");
    report->add_option("--runs", runs, "Config directories or roots to search")->required();
    report->add_option("--format", format, "markdown or csv");
    report->add_option("--out", report_out, "Write the table here instead of stdout");

    std::uint64_t gc_seed = 0;
    std::string corrupt;
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every adjoint");
    gradcheck->add_option("--seed", gc_seed, "Input seed");
    gradcheck->add_option("--corrupt", corrupt, "Scale one check's adjoint by 1.5 (self-test)")->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (*gen) return gen_data(task, n, data_seed, data_out);
        if (*train) return train_cmd(config_path);
        if (*eval) return eval_cmd(run_dir);
        if (*report) return report_cmd(runs, format, report_out);
        if (*gradcheck) return gradcheck_cmd(gc_seed, corrupt);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
