#include "peftlab/experiment.h"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <ostream>
#include <set>
#include <tuple>

#include "peftlab/checkpoint.h"
#include "peftlab/errors.h"

namespace peftlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr Task kAllTasks[] = {Task::kSepsis, Task::kMortality, Task::kNote};

std::uint64_t cohort_seed(std::uint64_t data_seed, std::size_t task_index, std::size_t split) {
    return data_seed * 1000 + task_index * 10 + split;
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

json to_json(const BaseConfig& b) {
    return json{{"mode", b.trained ? "trained" : "random"},
                {"examples", b.examples},
                {"epochs", b.epochs},
                {"learning_rate", b.learning_rate},
                {"batch_size", b.batch_size},
                {"seed", b.seed}};
}

BaseConfig base_config_from_json(const json& j) {
    BaseConfig b;
    const std::string mode = j.value("mode", std::string("trained"));
    if (mode != "trained" && mode != "random") throw ConfigError("base.mode must be 'trained' or 'random'");
    b.trained = mode == "trained";
    b.examples = j.value("examples", b.examples);
    b.epochs = j.value("epochs", b.epochs);
    b.learning_rate = j.value("learning_rate", b.learning_rate);
    b.batch_size = j.value("batch_size", b.batch_size);
    b.seed = j.value("seed", b.seed);
    return b;
}

json to_json(const CohortSizes& c) {
    return json{{"train", c.train}, {"test", c.test}, {"shot_pool", c.shot_pool}};
}

std::size_t max_new_tokens(Task task, const ModelConfig& mc) {
    // Yes/No plus EOS, with slack so a rambling model is still caught.
    if (task != Task::kNote) return 4;
    return std::min<std::size_t>(64, mc.max_seq_len);
}

void say(std::ostream* log, const std::string& line) {
    if (log) *log << line << std::endl;
}

json read_json(const fs::path& path) {
    try {
        return json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

std::string fmt(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    return buf;
}

}  // namespace

void ExperimentConfig::validate() const {
    model.validate();
    adapter.validate(model);
    train.validate();
    if (tasks.empty()) throw ConfigError("experiment: no tasks");
    if (std::set<Task>(tasks.begin(), tasks.end()).size() != tasks.size()) {
        throw ConfigError("experiment: duplicate task");
    }
    if (adapter.lambda > 0.0 && train.lambda > 0.0 && adapter.lambda != train.lambda) {
        throw ConfigError("experiment: adapter.lambda and train.lambda disagree");
    }
    if (seeds.empty()) throw ConfigError("experiment: no seeds");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
        throw ConfigError("experiment: duplicate seed");
    }
    if (cohort.train == 0 || cohort.test == 0) throw ConfigError("experiment: empty train or test cohort");
    if (shots > cohort.shot_pool) {
        throw ConfigError("experiment: " + std::to_string(shots) + " shots from a pool of " +
                          std::to_string(cohort.shot_pool));
    }
    if (base.trained && (base.examples == 0 || base.epochs == 0 || base.batch_size == 0 ||
                         !(base.learning_rate > 0.0))) {
        throw ConfigError("experiment: base training needs examples, epochs, batch_size and learning_rate > 0");
    }
    if (slug().empty() || slug() == "base") throw ConfigError("experiment: unusable config name '" + slug() + "'");
}

std::string slugify(const std::string& label) {
    std::string out;
    for (char c : label) {
        const unsigned char u = static_cast<unsigned char>(c);
        if (std::isalnum(u) || c == '.') {
            out += static_cast<char>(std::tolower(u));
        } else if (!out.empty() && out.back() != '-') {
            out += '-';
        }
    }
    while (!out.empty() && out.back() == '-') out.pop_back();
    return out;
}

std::string ExperimentConfig::slug() const { return name.empty() ? slugify(adapter.label()) : name; }

fs::path ExperimentConfig::output_root() const {
    if (const char* env = std::getenv(kOutputRootEnv); env && *env) return env;
    return output_dir;
}

fs::path ExperimentConfig::run_dir() const { return output_root() / to_string(adapter.method) / slug(); }

json to_json(const ExperimentConfig& c) {
    json tasks = json::array();
    for (auto t : c.tasks) tasks.push_back(to_string(t));
    return json{{"name", c.name},
                {"model", to_json(c.model)},
                {"adapter", to_json(c.adapter)},
                {"train", to_json(c.train)},
                {"tasks", tasks},
                {"cohort", to_json(c.cohort)},
                {"shots", c.shots},
                {"seeds", c.seeds},
                {"data_seed", c.data_seed},
                {"base", to_json(c.base)},
                {"output_dir", c.output_dir.string()}};
}

ExperimentConfig experiment_config_from_json(const json& j) {
    static const std::set<std::string> known{"name",  "model", "adapter",   "train", "tasks",     "cohort",
                                             "shots", "seeds", "data_seed", "base",  "output_dir"};
    if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (!known.count(key)) throw ConfigError("experiment config: unknown key '" + key + "'");
    }
    if (!j.contains("adapter")) throw ConfigError("experiment config: missing 'adapter'");
    ExperimentConfig c;
    try {
        c.name = j.value("name", std::string());
        if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
        c.adapter = adapter_config_from_json(j.at("adapter"));
        if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
        if (j.contains("tasks")) {
            c.tasks.clear();
            for (const auto& t : j.at("tasks")) c.tasks.push_back(parse_task(t.get<std::string>()));
        }
        if (j.contains("cohort")) {
            const auto& k = j.at("cohort");
            c.cohort.train = k.value("train", c.cohort.train);
            c.cohort.test = k.value("test", c.cohort.test);
            c.cohort.shot_pool = k.value("shot_pool", c.cohort.shot_pool);
        }
        c.shots = j.value("shots", c.shots);
        if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        c.data_seed = j.value("data_seed", c.data_seed);
        if (j.contains("base")) c.base = base_config_from_json(j.at("base"));
        c.output_dir = j.value("output_dir", c.output_dir.string());
    } catch (const json::exception& e) {
        throw ConfigError(std::string("experiment config: ") + e.what());
    }
    c.validate();
    return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
    if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
    std::string text;
    try {
        text = read_text_file(path);
    } catch (const DataError& e) {
        throw ConfigError(e.what());
    }
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return experiment_config_from_json(j);
}

const TaskData& ExperimentData::task(Task t) const {
    for (const auto& d : tasks) {
        if (d.task == t) return d;
    }
    throw UsageError("no data for task " + to_string(t));
}

ExperimentData build_experiment_data(const ExperimentConfig& c) {
    ExperimentData data;
    std::vector<LabeledExample> all;
    for (std::size_t i = 0; i < std::size(kAllTasks); ++i) {
        TaskData d;
        d.task = kAllTasks[i];
        d.train = generate_cohort(d.task, c.cohort.train, cohort_seed(c.data_seed, i, 0));
        d.test = generate_cohort(d.task, c.cohort.test, cohort_seed(c.data_seed, i, 1));
        if (c.cohort.shot_pool > 0) {
            d.pool = generate_cohort(d.task, c.cohort.shot_pool, cohort_seed(c.data_seed, i, 2));
        }
        for (const auto* split : {&d.train, &d.test, &d.pool}) all.insert(all.end(), split->begin(), split->end());
        data.tasks.push_back(std::move(d));
    }
    if (c.base.trained) {
        data.base_corpus = generate_cohort(Task::kNote, c.base.examples, cohort_seed(c.data_seed, 3, 0));
        all.insert(all.end(), data.base_corpus.begin(), data.base_corpus.end());
    }
    data.vocab = Vocabulary::build(all);
    return data;
}

ModelConfig resolved_model_config(const ExperimentConfig& c, const ExperimentData& data) {
    ModelConfig mc = c.model;
    mc.vocab_size = data.vocab.size();
    return mc;
}

fs::path base_cache_path(const ExperimentConfig& c, const ExperimentData& data) {
    const json key{{"model", to_json(resolved_model_config(c, data))},
                   {"base", to_json(c.base)},
                   {"cohort", to_json(c.cohort)},
                   {"data_seed", c.data_seed}};
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a(key.dump())));
    return c.output_root() / "base" / hex / "base.json";
}

ModelParams obtain_base(const ExperimentConfig& c, const ExperimentData& data, std::ostream* log) {
    const ModelConfig mc = resolved_model_config(c, data);
    const fs::path path = base_cache_path(c, data);
    if (fs::exists(path)) {
        say(log, "base: loading " + path.string());
        ModelParams params = deserialize_model(read_text_file(path));
        if (to_json(params.config) != to_json(mc)) throw DataError("cached base " + path.string() + " has a different config");
        return params;
    }
    ModelParams params = init_model(mc, c.base.seed);
    if (c.base.trained) {
        say(log, "base: training on " + std::to_string(data.base_corpus.size()) + " notes for " +
                     std::to_string(c.base.epochs) + " epochs");
        const auto encoded = encode_examples(data.base_corpus, data.vocab, {}, 0, mc.max_seq_len);
        TrainConfig tc;
        tc.learning_rate = c.base.learning_rate;
        tc.batch_size = c.base.batch_size;
        tc.epochs = c.base.epochs;
        tc.seed = c.base.seed;
        base_train(params, encoded, tc, [&](std::size_t epoch, double loss) {
            say(log, "base: epoch " + std::to_string(epoch) + " loss " + fmt(loss, 6));
        });
    }
    write_text_file(path, serialize_model(params));
    write_text_file(path.parent_path() / "vocab.json", vocab_to_json(data.vocab));
    say(log, "base: saved " + path.string());
    return params;
}

std::vector<LabeledExample> seed_shots(const TaskData& data, std::size_t k, std::uint64_t seed) {
    if (k == 0) return {};
    return select_shots(data.pool, k, seed);
}

double evaluate_task(const ModelParams& params, const AdapterHooks* adapters, const Vocabulary& vocab, Task task,
                     std::span<const LabeledExample> examples, std::span<const LabeledExample> shots,
                     std::size_t k) {
    if (examples.empty()) throw UsageError("evaluate_task: no examples");
    std::vector<Answer> predicted, gold;
    double note_total = 0.0;
    for (const auto& ex : examples) {
        const std::string prompt = k == 0 ? ex.prompt_text : few_shot_assemble(shots, ex.prompt_text, k);
        const auto ids = tokenize(prompt, vocab);
        const auto out = greedy_generate(params, adapters, ids, max_new_tokens(task, params.config));
        const std::string text = detokenize(out, vocab);
        if (task == Task::kNote) {
            note_total += note_overlap_score(text, ex.target_text);
        } else {
            predicted.push_back(parse_answer(text, task));
            gold.push_back(gold_answer(ex));
        }
    }
    if (task == Task::kNote) return note_total / static_cast<double>(examples.size());
    return 100.0 * accuracy(predicted, gold);
}

std::vector<SeedResult> run_training(const ExperimentConfig& c, std::ostream* log) {
    c.validate();
    const ExperimentData data = build_experiment_data(c);
    const ModelConfig mc = resolved_model_config(c, data);
    c.adapter.validate(mc);
    const ModelParams base = obtain_base(c, data, log);
    const fs::path dir = c.run_dir();

    const double pct = 100.0 * trainable_fraction(init_adapters(c.adapter, mc, 0), base);
    json manifest{{"config", to_json(c)},
                  {"method", to_string(c.adapter.method)},
                  {"label", c.adapter.label()},
                  {"trainable_pct", pct},
                  {"base", fs::absolute(base_cache_path(c, data)).string()}};
    write_text_file(dir / "experiment.json", manifest.dump(2) + "\n");

    std::vector<SeedResult> results;
    for (auto seed : c.seeds) {
        SeedResult sr;
        sr.seed = seed;
        for (auto task : c.tasks) {
            const TaskData& td = data.task(task);
            const auto shots = seed_shots(td, c.shots, seed);
            const auto encoded = encode_examples(td.train, data.vocab, shots, c.shots, mc.max_seq_len);
            AdapterSet adapters = init_adapters(c.adapter, mc, seed);
            TrainConfig tc = c.train;
            tc.seed = seed;
            if (tc.lambda == 0.0) tc.lambda = c.adapter.lambda;
            const std::string tag = "seed " + std::to_string(seed) + " " + to_string(task);
            const TrainReport report = train(base, adapters, encoded, tc, [&](std::size_t epoch, double loss) {
                say(log, tag + " epoch " + std::to_string(epoch) + " loss " + fmt(loss, 6));
            });
            const fs::path out = dir / std::to_string(seed) / to_string(task);
            write_text_file(out / "adapters.json", serialize_adapters(adapters));
            write_text_file(out / "train_report.json", to_json(report).dump(2) + "\n");
            sr.reports.emplace_back(task, report);
        }
        results.push_back(std::move(sr));
    }
    return results;
}

namespace {

struct RunDir {
    fs::path config_dir;
    json manifest;
    ExperimentConfig config;
};

RunDir open_run_dir(const fs::path& config_dir) {
    RunDir r;
    r.config_dir = config_dir;
    r.manifest = read_json(config_dir / "experiment.json");
    try {
        r.config = experiment_config_from_json(r.manifest.at("config"));
    } catch (const json::exception& e) {
        throw DataError((config_dir / "experiment.json").string() + ": " + e.what());
    }
    return r;
}

}  // namespace

std::vector<fs::path> run_evaluation(const fs::path& dir, std::ostream* log) {
    std::vector<std::uint64_t> seeds;
    fs::path config_dir;
    if (fs::exists(dir / "experiment.json")) {
        config_dir = dir;
    } else if (fs::exists(dir.parent_path() / "experiment.json")) {
        config_dir = dir.parent_path();
        try {
            seeds.push_back(std::stoull(dir.filename().string()));
        } catch (const std::exception&) {
            throw DataError("not a seed directory: " + dir.string());
        }
    } else {
        throw DataError("no experiment.json in or above " + dir.string());
    }
    const RunDir run = open_run_dir(config_dir);
    if (seeds.empty()) seeds = run.config.seeds;

    const ExperimentData data = build_experiment_data(run.config);
    const fs::path base_path = run.manifest.value("base", std::string());
    if (!fs::exists(base_path)) throw DataError("base checkpoint missing: " + base_path.string());
    const ModelParams base = deserialize_model(read_text_file(base_path));
    if (base.config.vocab_size != data.vocab.size()) throw DataError("base checkpoint does not match the data");

    std::vector<fs::path> done;
    for (auto seed : seeds) {
        const fs::path seed_dir = config_dir / std::to_string(seed);
        json scores = json::object();
        for (auto task : run.config.tasks) {
            const fs::path ckpt = seed_dir / to_string(task) / "adapters.json";
            if (!fs::exists(ckpt)) throw DataError("missing checkpoint " + ckpt.string());
            const AdapterSet adapters = deserialize_adapters(read_text_file(ckpt), base.config);
            const TaskData& td = data.task(task);
            const auto shots = seed_shots(td, run.config.shots, seed);
            const double score = evaluate_task(base, &adapters, data.vocab, task, td.test, shots, run.config.shots);
            scores[to_string(task)] = score;
            say(log, "seed " + std::to_string(seed) + " " + to_string(task) + " score " + fmt(score, 2));
        }
        json metrics{{"seed", seed}, {"trainable_pct", run.manifest.value("trainable_pct", 0.0)}, {"scores", scores}};
        write_text_file(seed_dir / "metrics.json", metrics.dump(2) + "\n");
        done.push_back(seed_dir);
    }
    return done;
}

std::vector<RunRow> collect_rows(const std::vector<fs::path>& paths) {
    std::set<fs::path> config_dirs;
    for (const auto& p : paths) {
        if (!fs::is_directory(p)) throw DataError("not a directory: " + p.string());
        if (fs::exists(p / "experiment.json")) {
            config_dirs.insert(fs::weakly_canonical(p));
            continue;
        }
        for (const auto& entry : fs::recursive_directory_iterator(p)) {
            if (entry.is_regular_file() && entry.path().filename() == "experiment.json") {
                config_dirs.insert(fs::weakly_canonical(entry.path().parent_path()));
            }
        }
    }
    if (config_dirs.empty()) throw DataError("no runs found");

    struct Keyed {
        AdapterMethod method;
        double pct;
        std::string dir;
        RunRow row;
    };
    std::vector<Keyed> keyed;
    for (const auto& dir : config_dirs) {
        const json manifest = read_json(dir / "experiment.json");
        const AdapterMethod method = parse_adapter_method(manifest.at("method").get<std::string>());
        std::map<std::string, std::vector<double>> values;
        std::size_t evaluated = 0;
        for (const auto& entry : fs::directory_iterator(dir)) {
            const fs::path m = entry.path() / "metrics.json";
            if (!entry.is_directory() || !fs::exists(m)) continue;
            ++evaluated;
            const json metrics = read_json(m);
            for (const auto& [task, score] : metrics.at("scores").items()) {
                values[task].push_back(score.get<double>());
            }
        }
        if (evaluated == 0) throw DataError("no evaluated seeds under " + dir.string());
        auto metric = [&](Task t, const char* name) {
            const auto it = values.find(to_string(t));
            if (it == values.end()) return MetricResult{0.0, 0.0, 0, name};
            return aggregate(it->second, name);
        };
        const double pct = manifest.value("trainable_pct", 0.0);
        keyed.push_back({method, pct, dir.filename().string(),
                         make_row(method_display_name(method), manifest.value("label", dir.filename().string()), pct,
                                  metric(Task::kSepsis, "accuracy"), metric(Task::kMortality, "accuracy"),
                                  metric(Task::kNote, "note_f1"))});
    }
    std::sort(keyed.begin(), keyed.end(), [](const Keyed& a, const Keyed& b) {
        return std::tie(a.method, a.pct, a.dir) < std::tie(b.method, b.pct, b.dir);
    });
    std::vector<RunRow> rows;
    for (auto& k : keyed) rows.push_back(std::move(k.row));
    return rows;
}

}  // namespace peftlab
