#include "peftlab/icu_tasks.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <random>
#include <set>

#include "peftlab/errors.h"
#include "peftlab/model.h"

namespace peftlab {

namespace {

using nlohmann::json;

std::string fixed1(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", v);
    return buf;
}

std::string integer(double v) { return std::to_string(static_cast<long long>(std::llround(v))); }

// Dividing by the integral reciprocal keeps 38.8 from becoming 38.800000000000004.
double round_to(double v, double step) {
    if (step >= 1.0) return std::round(v / step) * step;
    const double inv = std::round(1.0 / step);
    return std::round(v * inv) / inv;
}

std::string join_findings(const std::vector<std::string>& items) {
    std::string s;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i > 0) s += (i + 1 == items.size()) ? " and " : ", ";
        s += items[i];
    }
    return s;
}

PatientRecord sample_record(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
    PatientRecord r;
    const double t = u(rng);
    r.temperature_c = round_to(t < 0.25 ? uniform(38.1, 40.5) : t < 0.35 ? uniform(34.5, 35.9)
                                                                       : uniform(36.0, 38.0),
                               0.1);
    r.heart_rate_bpm = std::round(u(rng) < 0.35 ? uniform(91, 150) : uniform(55, 90));
    r.resp_rate = std::round(u(rng) < 0.35 ? uniform(21, 36) : uniform(10, 20));
    const double w = u(rng);
    r.wbc_per_ul = round_to(w < 0.25 ? uniform(12500, 25000) : w < 0.35 ? uniform(1500, 3500)
                                                                      : uniform(4000, 12000),
                            500.0);
    r.sbp_mmhg = std::round(u(rng) < 0.2 ? uniform(70, 89) : uniform(90, 160));
    r.dbp_mmhg = std::round(r.sbp_mmhg * uniform(0.55, 0.7));
    r.spo2_pct = std::round(u(rng) < 0.3 ? uniform(80, 89) : uniform(90, 100));
    r.lactate_mmol = round_to(uniform(0.5, 6.0), 0.1);
    r.creatinine_mg_dl = round_to(uniform(0.5, 4.0), 0.1);
    r.age_years = static_cast<int>(std::lround(uniform(18, 95)));
    r.chf_history = u(rng) < 0.3;
    r.urine_output_low = u(rng) < 0.2;
    return r;
}

json record_to_json(const PatientRecord& r) {
    return json{{"temperature_c", r.temperature_c},
                {"heart_rate_bpm", r.heart_rate_bpm},
                {"sbp_mmhg", r.sbp_mmhg},
                {"dbp_mmhg", r.dbp_mmhg},
                {"resp_rate", r.resp_rate},
                {"wbc_per_ul", r.wbc_per_ul},
                {"spo2_pct", r.spo2_pct},
                {"lactate_mmol", r.lactate_mmol},
                {"creatinine_mg_dl", r.creatinine_mg_dl},
                {"age_years", r.age_years},
                {"chf_history", r.chf_history},
                {"urine_output_low", r.urine_output_low}};
}

PatientRecord record_from_json(const json& j) {
    PatientRecord r;
    r.temperature_c = j.at("temperature_c").get<double>();
    r.heart_rate_bpm = j.at("heart_rate_bpm").get<double>();
    r.sbp_mmhg = j.at("sbp_mmhg").get<double>();
    r.dbp_mmhg = j.at("dbp_mmhg").get<double>();
    r.resp_rate = j.at("resp_rate").get<double>();
    r.wbc_per_ul = j.at("wbc_per_ul").get<double>();
    r.spo2_pct = j.at("spo2_pct").get<double>();
    r.lactate_mmol = j.at("lactate_mmol").get<double>();
    r.creatinine_mg_dl = j.at("creatinine_mg_dl").get<double>();
    r.age_years = j.at("age_years").get<int>();
    r.chf_history = j.at("chf_history").get<bool>();
    r.urine_output_low = j.at("urine_output_low").get<bool>();
    return r;
}

bool attaches_left(const std::string& tok) {
    static const std::set<std::string> kClosing{",", ".", "?", ":", ";", "!", "%", ")", "/"};
    return kClosing.count(tok) > 0;
}

bool attaches_right(const std::string& tok) { return tok == "(" || tok == "/"; }

}  // namespace

std::string to_string(Task t) {
    switch (t) {
        case Task::kSepsis: return "sepsis";
        case Task::kMortality: return "mortality";
        case Task::kNote: return "note";
    }
    return "?";
}

Task parse_task(const std::string& s) {
    if (s == "sepsis") return Task::kSepsis;
    if (s == "mortality") return Task::kMortality;
    if (s == "note") return Task::kNote;
    throw ConfigError("unknown task '" + s + "' (expected sepsis, mortality or note)");
}

int sirs_criteria(const PatientRecord& r) {
    int n = 0;
    if (r.temperature_c > 38.0 || r.temperature_c < 36.0) ++n;
    if (r.heart_rate_bpm > 90.0) ++n;
    if (r.resp_rate > 20.0) ++n;
    if (r.wbc_per_ul > 12000.0 || r.wbc_per_ul < 4000.0) ++n;
    return n;
}

int mortality_risk_score(const PatientRecord& r) {
    int n = 0;
    if (r.age_years > 70) ++n;
    if (r.spo2_pct < 90.0) ++n;
    if (r.resp_rate > 24.0) ++n;
    if (r.chf_history) ++n;
    return n;
}

bool sepsis_label(const PatientRecord& r) { return sirs_criteria(r) >= 2; }

bool mortality_label(const PatientRecord& r) { return mortality_risk_score(r) >= 2; }

std::vector<std::string> abnormal_findings(const PatientRecord& r) {
    std::vector<std::string> f;
    if (r.temperature_c > 38.0) f.push_back("fever");
    if (r.temperature_c < 36.0) f.push_back("hypothermia");
    if (r.heart_rate_bpm > 90.0) f.push_back("tachycardia");
    if (r.sbp_mmhg < 90.0) f.push_back("hypotension");
    if (r.resp_rate > 20.0) f.push_back("tachypnea");
    if (r.wbc_per_ul > 12000.0) f.push_back("leukocytosis");
    if (r.wbc_per_ul < 4000.0) f.push_back("leukopenia");
    if (r.urine_output_low) f.push_back("decreased urine output");
    return f;
}

std::string render_note(const PatientRecord& r) {
    const auto findings = abnormal_findings(r);
    if (findings.empty()) {
        return "Patient is stable with no acute abnormal findings. Recommend routine monitoring.";
    }
    std::string note = "Patient exhibits " + join_findings(findings) + ".";
    note += findings.size() >= 2 ? " Recommend close monitoring and early intervention."
                                 : " Recommend continued monitoring.";
    return note;
}

std::string render_target(const PatientRecord& r, Task task) {
    switch (task) {
        case Task::kSepsis: return sepsis_label(r) ? "Yes" : "No";
        case Task::kMortality: return mortality_label(r) ? "Yes" : "No";
        case Task::kNote: return render_note(r);
    }
    return {};
}

std::string_view task_instruction(Task task) {
    switch (task) {
        case Task::kSepsis: return "Question: Does the patient have sepsis? Answer:";
        case Task::kMortality: return "Question: Will the patient die during the hospital stay? Answer:";
        case Task::kNote: return "Task: Generate clinical note.";
    }
    return {};
}

std::string render_clinical_data(const PatientRecord& r, Task task) {
    const std::string temp = "temperature " + fixed1(r.temperature_c) + " C";
    const std::string hr = "heart rate " + integer(r.heart_rate_bpm) + " bpm";
    const std::string rr = "respiratory rate " + integer(r.resp_rate) + "/min";
    const std::string wbc = "WBC " + integer(r.wbc_per_ul) + "/uL";
    switch (task) {
        case Task::kSepsis:
            return temp + ", " + hr + ", " + rr + ", " + wbc;
        case Task::kMortality:
            return "age " + std::to_string(r.age_years) + " years, SpO2 " + integer(r.spo2_pct) + "%, " +
                   rr + ", chronic heart failure " + (r.chf_history ? "yes" : "no");
        case Task::kNote:
            return temp + ", " + hr + ", blood pressure " + integer(r.sbp_mmhg) + "/" +
                   integer(r.dbp_mmhg) + " mmHg, " + rr + ", " + wbc + ", urine output " +
                   (r.urine_output_low ? "low" : "normal");
    }
    return {};
}

std::string render_prompt(const PatientRecord& r, Task task) {
    std::string header;
    switch (task) {
        case Task::kSepsis: header = "Patient vitals and labs: "; break;
        case Task::kMortality: header = "Patient ICU notes and labs: "; break;
        case Task::kNote: header = "Patient summary: "; break;
    }
    return header + render_clinical_data(r, task) + "\n" + std::string(task_instruction(task));
}

bool balance_label(const PatientRecord& r, Task task) {
    switch (task) {
        case Task::kSepsis: return sepsis_label(r);
        case Task::kMortality: return mortality_label(r);
        case Task::kNote: return !abnormal_findings(r).empty();
    }
    return false;
}

std::vector<LabeledExample> generate_cohort(Task task, std::size_t n, std::uint64_t seed) {
    if (n < 1) throw ConfigError("cohort size must be >= 1");
    std::mt19937_64 rng(seed);
    // Exactly floor(n/2) positives, in a seeded order.
    std::vector<std::uint8_t> want(n, 0);
    for (std::size_t i = 0; i < n / 2; ++i) want[i] = 1;
    for (std::size_t i = n; i-- > 1;) std::swap(want[i], want[rng() % (i + 1)]);
    std::vector<LabeledExample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        PatientRecord r = sample_record(rng);
        while (balance_label(r, task) != static_cast<bool>(want[i])) r = sample_record(rng);
        out.push_back({task, render_prompt(r, task), render_target(r, task), r});
    }
    return out;
}

std::vector<LabeledExample> select_shots(std::span<const LabeledExample> pool, std::size_t k,
                                         std::uint64_t seed) {
    if (pool.size() < k) {
        throw ConfigError("need " + std::to_string(k) + " shots but the pool has " +
                          std::to_string(pool.size()));
    }
    std::vector<std::size_t> order(pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[rng() % (i + 1)]);
    std::vector<LabeledExample> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(pool[order[i]]);
    return out;
}

std::string few_shot_assemble(std::span<const LabeledExample> shots, const std::string& query_prompt,
                              std::size_t k) {
    if (shots.size() < k) {
        throw ConfigError("few-shot assembly needs " + std::to_string(k) + " shots, got " +
                          std::to_string(shots.size()));
    }
    std::string out;
    for (std::size_t i = 0; i < k; ++i) {
        if (i > 0 && shots[i].task != shots[0].task) {
            throw ConfigError("few-shot exemplars mix tasks");
        }
        out += shots[i].prompt_text + " " + shots[i].target_text + "\n";
    }
    if (k > 0 && query_prompt.find(task_instruction(shots[0].task)) == std::string::npos) {
        throw ConfigError("query prompt does not belong to the exemplars' task");
    }
    return out + query_prompt;
}

CohortSplit split_cohort(std::span<const LabeledExample> examples, std::uint64_t seed,
                         double train_frac, double val_frac) {
    if (train_frac < 0 || val_frac < 0 || train_frac + val_frac > 1.0) {
        throw ConfigError("split fractions must be non-negative and sum to at most 1");
    }
    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[rng() % (i + 1)]);
    const std::size_t n = examples.size();
    const auto n_val = static_cast<std::size_t>(std::floor(val_frac * static_cast<double>(n)));
    const auto n_test =
        static_cast<std::size_t>(std::floor((1.0 - train_frac - val_frac) * static_cast<double>(n) + 1e-9));
    CohortSplit s;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& ex = examples[order[i]];
        if (i < n - n_val - n_test) {
            s.train.push_back(ex);
        } else if (i < n - n_test) {
            s.val.push_back(ex);
        } else {
            s.test.push_back(ex);
        }
    }
    return s;
}

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    auto is_alnum = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
    auto is_digit = [](char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; };
    while (i < text.size()) {
        const char c = text[i];
        if (c == '\n') {
            out.emplace_back("\n");
            ++i;
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
            continue;
        }
        if (is_alnum(c)) {
            std::size_t j = i;
            while (j < text.size()) {
                if (is_alnum(text[j])) {
                    ++j;
                } else if (text[j] == '.' && j + 1 < text.size() && is_digit(text[j + 1]) &&
                           is_digit(text[j - 1])) {
                    ++j;  // decimal point inside a number
                } else {
                    break;
                }
            }
            std::string w(text.substr(i, j - i));
            for (auto& ch : w) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
            out.push_back(std::move(w));
            i = j;
            continue;
        }
        // One token per non-space, non-alphanumeric byte; multi-byte UTF-8
        // sequences stay together.
        std::size_t len = 1;
        const auto uc = static_cast<unsigned char>(c);
        if (uc >= 0xC0) len = uc >= 0xF0 ? 4 : uc >= 0xE0 ? 3 : 2;
        out.emplace_back(text.substr(i, std::min(len, text.size() - i)));
        i += len;
    }
    return out;
}

Vocabulary::Vocabulary() {
    for (const char* t : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(t);
}

void Vocabulary::add(const std::string& token) {
    if (ids_.count(token)) return;
    ids_.emplace(token, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(token);
}

Vocabulary Vocabulary::build(std::span<const std::string> texts) {
    std::set<std::string> words;
    for (const auto& t : texts) {
        for (auto& w : split_words(t)) words.insert(std::move(w));
    }
    Vocabulary v;
    for (const auto& w : words) v.add(w);
    return v;
}

Vocabulary Vocabulary::build(std::span<const LabeledExample> examples) {
    std::vector<std::string> texts;
    texts.reserve(examples.size() * 2);
    for (const auto& ex : examples) {
        texts.push_back(ex.prompt_text);
        texts.push_back(ex.target_text);
    }
    return build(texts);
}

Vocabulary Vocabulary::from_ids(const std::map<std::string, TokenId>& ids) {
    std::vector<std::string> by_id(ids.size());
    std::vector<bool> seen(ids.size(), false);
    for (const auto& [tok, id] : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= ids.size() || seen[static_cast<std::size_t>(id)]) {
            throw DataError("vocabulary ids must be a bijection onto 0..n-1");
        }
        seen[static_cast<std::size_t>(id)] = true;
        by_id[static_cast<std::size_t>(id)] = tok;
    }
    const Vocabulary reserved;
    for (std::size_t i = 0; i < reserved.size(); ++i) {
        if (i >= by_id.size() || by_id[i] != reserved.tokens_[i]) {
            throw DataError("vocabulary must reserve ids 0-3 for <pad>, <bos>, <eos>, <unk>");
        }
    }
    Vocabulary v;
    for (std::size_t i = reserved.size(); i < by_id.size(); ++i) v.add(by_id[i]);
    return v;
}

TokenId Vocabulary::id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw DataError("token id " + std::to_string(id) + " outside vocabulary of " +
                        std::to_string(tokens_.size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab) {
    std::vector<TokenId> ids;
    for (const auto& w : split_words(text)) ids.push_back(vocab.id(w));
    return ids;
}

std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab) {
    std::string out;
    bool glue_next = true;
    for (TokenId id : ids) {
        if (id == kPadId || id == kBosId || id == kEosId) continue;
        const std::string& tok = vocab.token(id);
        const bool newline = tok == "\n";
        if (!glue_next && !newline && !attaches_left(tok)) out += ' ';
        out += tok;
        glue_next = newline || attaches_right(tok);
    }
    return out;
}

std::string to_string(Answer a) {
    switch (a) {
        case Answer::kYes: return "Yes";
        case Answer::kNo: return "No";
        case Answer::kUnparseable: return "Unparseable";
    }
    return "?";
}

Answer parse_answer(std::string_view generated, Task task) {
    if (task == Task::kNote) throw UsageError("parse_answer: the note task has no Yes/No answer");
    const auto words = split_words(generated);
    if (words.empty()) return Answer::kUnparseable;
    if (words[0] == "yes") return Answer::kYes;
    if (words[0] == "no") return Answer::kNo;
    return Answer::kUnparseable;
}

Answer gold_answer(const LabeledExample& ex) { return parse_answer(ex.target_text, ex.task); }

std::string to_jsonl(std::span<const LabeledExample> examples) {
    std::string out;
    for (const auto& ex : examples) {
        json j{{"task", to_string(ex.task)},
               {"prompt", ex.prompt_text},
               {"target", ex.target_text},
               {"record", record_to_json(ex.record)}};
        out += j.dump() + "\n";
    }
    return out;
}

std::vector<LabeledExample> from_jsonl(std::string_view text) {
    std::vector<LabeledExample> out;
    std::size_t pos = 0, line_no = 0;
    while (pos < text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        const std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        try {
            const json j = json::parse(line);
            LabeledExample ex;
            ex.task = parse_task(j.at("task").get<std::string>());
            ex.prompt_text = j.at("prompt").get<std::string>();
            ex.target_text = j.at("target").get<std::string>();
            ex.record = record_from_json(j.at("record"));
            out.push_back(std::move(ex));
        } catch (const std::exception& e) {
            throw DataError("cohort line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

std::string vocab_to_json(const Vocabulary& vocab) {
    json j = json::object();
    for (const auto& [tok, id] : vocab.ids()) j[tok] = id;
    return j.dump(1) + "\n";
}

Vocabulary vocab_from_json(std::string_view text) {
    std::map<std::string, TokenId> ids;
    try {
        const json j = json::parse(text);
        for (const auto& [tok, id] : j.items()) ids[tok] = id.get<TokenId>();
    } catch (const json::exception& e) {
        throw DataError(std::string("vocabulary file: ") + e.what());
    }
    return Vocabulary::from_ids(ids);
}

}  // namespace peftlab
