#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "peftlab/ops.h"

namespace peftlab {

enum class Task { kSepsis, kMortality, kNote };

std::string to_string(Task t);
Task parse_task(const std::string& s);  // throws ConfigError

struct PatientRecord {
    double temperature_c = 37.0;
    double heart_rate_bpm = 80.0;
    double sbp_mmhg = 120.0;
    double dbp_mmhg = 80.0;
    double resp_rate = 16.0;
    double wbc_per_ul = 8000.0;
    double spo2_pct = 97.0;
    double lactate_mmol = 1.0;
    double creatinine_mg_dl = 1.0;
    int age_years = 50;
    bool chf_history = false;
    bool urine_output_low = false;

    bool operator==(const PatientRecord&) const = default;
};

struct LabeledExample {
    Task task = Task::kSepsis;
    std::string prompt_text;
    std::string target_text;
    PatientRecord record;

    bool operator==(const LabeledExample&) const = default;
};

// Number of SIRS criteria met: temperature > 38 or < 36; heart rate > 90;
// respiratory rate > 20; WBC > 12000 or < 4000.
int sirs_criteria(const PatientRecord& r);
// Mortality risk points: age > 70; SpO2 < 90; respiratory rate > 24; CHF.
int mortality_risk_score(const PatientRecord& r);
bool sepsis_label(const PatientRecord& r);     // sirs_criteria >= 2
bool mortality_label(const PatientRecord& r);  // mortality_risk_score >= 2
// Abnormal findings in fixed order, e.g. {"fever", "tachycardia"}.
std::vector<std::string> abnormal_findings(const PatientRecord& r);
std::string render_note(const PatientRecord& r);
std::string render_target(const PatientRecord& r, Task task);

// The task's fixed question or instruction string.
std::string_view task_instruction(Task task);
std::string render_clinical_data(const PatientRecord& r, Task task);
std::string render_prompt(const PatientRecord& r, Task task);

// Seeded synthetic cohort with 40-60% positive labels (rejection sampling).
// For the note task the balanced label is "has any abnormal finding".
std::vector<LabeledExample> generate_cohort(Task task, std::size_t n, std::uint64_t seed);
bool balance_label(const PatientRecord& r, Task task);

inline constexpr std::size_t kDefaultShots = 16;

// k exemplars drawn from `pool` in a seed-determined order.
std::vector<LabeledExample> select_shots(std::span<const LabeledExample> pool, std::size_t k,
                                         std::uint64_t seed);
// The first k shots as "prompt target" lines, then the query prompt.
// Throws ConfigError when fewer than k shots are given or tasks differ.
std::string few_shot_assemble(std::span<const LabeledExample> shots, const std::string& query_prompt,
                              std::size_t k = kDefaultShots);

struct CohortSplit {
    std::vector<LabeledExample> train, val, test;
};
// Seeded shuffle then 70/15/15 (train takes the rounding remainder).
CohortSplit split_cohort(std::span<const LabeledExample> examples, std::uint64_t seed,
                         double train_frac = 0.7, double val_frac = 0.15);

// Lowercased word-level split: alphanumeric runs (decimal numbers stay
// whole), "\n" for line breaks, and every other non-space character as its
// own token.
std::vector<std::string> split_words(std::string_view text);

class Vocabulary {
public:
    Vocabulary();  // reserved tokens only
    static Vocabulary build(std::span<const std::string> texts);
    static Vocabulary build(std::span<const LabeledExample> examples);

    TokenId id(const std::string& token) const;  // kUnkId when absent
    const std::string& token(TokenId id) const;  // throws DataError
    bool contains(const std::string& token) const { return ids_.count(token) > 0; }
    std::size_t size() const { return tokens_.size(); }
    const std::map<std::string, TokenId>& ids() const { return ids_; }

    static Vocabulary from_ids(const std::map<std::string, TokenId>& ids);  // throws DataError

private:
    void add(const std::string& token);
    std::vector<std::string> tokens_;
    std::map<std::string, TokenId> ids_;
};

std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab);
// Joins tokens with single spaces, attaching closing punctuation to the
// previous token and '/' and "\n" to both neighbours. Reserved ids are
// skipped.
std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab);

enum class Answer { kYes, kNo, kUnparseable };
std::string to_string(Answer a);
// Case-insensitive match of the first token. Throws UsageError for the
// note task.
Answer parse_answer(std::string_view generated, Task task);
Answer gold_answer(const LabeledExample& ex);

// JSON Lines cohort I/O.
std::string to_jsonl(std::span<const LabeledExample> examples);
std::vector<LabeledExample> from_jsonl(std::string_view text);  // throws DataError
std::string vocab_to_json(const Vocabulary& vocab);
Vocabulary vocab_from_json(std::string_view text);

}  // namespace peftlab
