#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "peftlab/errors.h"
#include "peftlab/icu_tasks.h"
#include "peftlab/model.h"

namespace peftlab {
namespace {

std::size_t count_of(const std::string& hay, std::string_view needle) {
    std::size_t n = 0;
    for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) ++n;
    return n;
}

PatientRecord febrile_tachycardic() {
    PatientRecord r;
    r.temperature_c = 38.5;
    r.heart_rate_bpm = 110;
    r.wbc_per_ul = 15000;
    r.resp_rate = 18;
    return r;
}

TEST(Labels, FebrileTachycardicIsSepsis) {
    const PatientRecord r = febrile_tachycardic();
    // fever, HR 110 and WBC 15000 all meet a criterion; RR 18 does not.
    EXPECT_EQ(sirs_criteria(r), 3);
    EXPECT_EQ(render_target(r, Task::kSepsis), "Yes");
}

TEST(Labels, ElderlyHypoxicChfIsMortality) {
    PatientRecord r;
    r.age_years = 75;
    r.spo2_pct = 88;
    r.resp_rate = 28;
    r.chf_history = true;
    EXPECT_EQ(mortality_risk_score(r), 4);
    EXPECT_EQ(render_target(r, Task::kMortality), "Yes");
}

TEST(Labels, NormalVitalsAreNotSepsis) {
    PatientRecord r;
    r.temperature_c = 37.0;
    r.heart_rate_bpm = 72;
    r.resp_rate = 14;
    r.wbc_per_ul = 7000;
    EXPECT_EQ(sirs_criteria(r), 0);
    EXPECT_EQ(render_target(r, Task::kSepsis), "No");
}

TEST(Labels, ThresholdsAreStrict) {
    PatientRecord r;
    r.temperature_c = 38.0;
    r.heart_rate_bpm = 90;
    r.resp_rate = 20;
    r.wbc_per_ul = 12000;
    EXPECT_EQ(sirs_criteria(r), 0);
    r.temperature_c = 36.0;
    r.wbc_per_ul = 4000;
    EXPECT_EQ(sirs_criteria(r), 0);
    r.temperature_c = 35.9;
    r.wbc_per_ul = 3999;
    EXPECT_EQ(sirs_criteria(r), 2);
    PatientRecord m;
    m.age_years = 70;
    m.spo2_pct = 90;
    m.resp_rate = 24;
    EXPECT_EQ(mortality_risk_score(m), 0);
}

// Independent oracle for the sepsis rule over the generator's output.
TEST(Labels, GeneratedLabelsFollowTheRules) {
    for (const auto& ex : generate_cohort(Task::kSepsis, 300, 4)) {
        const auto& r = ex.record;
        const int n = (r.temperature_c > 38 || r.temperature_c < 36) + (r.heart_rate_bpm > 90) +
                      (r.resp_rate > 20) + (r.wbc_per_ul > 12000 || r.wbc_per_ul < 4000);
        EXPECT_EQ(ex.target_text, n >= 2 ? "Yes" : "No");
    }
    for (const auto& ex : generate_cohort(Task::kMortality, 300, 4)) {
        const auto& r = ex.record;
        const int n = (r.age_years > 70) + (r.spo2_pct < 90) + (r.resp_rate > 24) + r.chf_history;
        EXPECT_EQ(ex.target_text, n >= 2 ? "Yes" : "No");
    }
}

TEST(Notes, FindingsTemplate) {
    EXPECT_EQ(render_target(febrile_tachycardic(), Task::kNote),
              "Patient exhibits fever, tachycardia and leukocytosis. Recommend close monitoring and early "
              "intervention.");
    PatientRecord r;
    EXPECT_EQ(render_note(r), "Patient is stable with no acute abnormal findings. Recommend routine monitoring.");
    r.heart_rate_bpm = 120;
    EXPECT_EQ(render_note(r), "Patient exhibits tachycardia. Recommend continued monitoring.");
}

TEST(Prompts, SepsisTemplate) {
    EXPECT_EQ(render_prompt(febrile_tachycardic(), Task::kSepsis),
              "Patient vitals and labs: temperature 38.5 C, heart rate 110 bpm, respiratory rate 18/min, "
              "WBC 15000/uL\nQuestion: Does the patient have sepsis? Answer:");
}

TEST(Prompts, MortalityAndNoteEndings) {
    const PatientRecord r = febrile_tachycardic();
    const std::string m = render_prompt(r, Task::kMortality);
    EXPECT_TRUE(m.starts_with("Patient ICU notes and labs: "));
    EXPECT_TRUE(m.ends_with("Will the patient die during the hospital stay? Answer:"));
    const std::string n = render_prompt(r, Task::kNote);
    EXPECT_TRUE(n.starts_with("Patient summary: "));
    EXPECT_TRUE(n.ends_with("\nTask: Generate clinical note."));
}

TEST(Prompts, EveryGeneratedPromptHasItsInstruction) {
    for (Task t : {Task::kSepsis, Task::kMortality, Task::kNote}) {
        for (const auto& ex : generate_cohort(t, 50, 9)) {
            EXPECT_EQ(ex.task, t);
            EXPECT_EQ(ex.prompt_text, render_prompt(ex.record, t));
            EXPECT_TRUE(ex.prompt_text.ends_with(task_instruction(t)));
        }
    }
}

TEST(Prompts, TemperatureHasOneDecimal) {
    PatientRecord r;
    r.temperature_c = 37.0;
    EXPECT_NE(render_prompt(r, Task::kSepsis).find("temperature 37.0 C"), std::string::npos);
}

TEST(Cohort, SameSeedIsIdentical) {
    for (Task t : {Task::kSepsis, Task::kMortality, Task::kNote}) {
        const auto a = generate_cohort(t, 64, 3), b = generate_cohort(t, 64, 3);
        EXPECT_EQ(to_jsonl(a), to_jsonl(b));
        EXPECT_NE(to_jsonl(a), to_jsonl(generate_cohort(t, 64, 4)));
    }
}

TEST(Cohort, ClassBalanceWithinBounds) {
    for (Task t : {Task::kSepsis, Task::kMortality, Task::kNote}) {
        for (std::size_t n : {1u, 7u, 128u, 513u}) {
            const auto c = generate_cohort(t, n, 17);
            ASSERT_EQ(c.size(), n);
            std::size_t pos = 0;
            for (const auto& ex : c) pos += balance_label(ex.record, t);
            if (n >= 10) {
                EXPECT_GE(pos * 10, n * 4);
                EXPECT_LE(pos * 10, n * 6);
            }
        }
    }
}

TEST(Cohort, VitalsInRangeAndRoundedCleanly) {
    for (const auto& ex : generate_cohort(Task::kNote, 400, 21)) {
        const auto& r = ex.record;
        EXPECT_GE(r.temperature_c, 34.0);
        EXPECT_LE(r.temperature_c, 42.0);
        EXPECT_GE(r.heart_rate_bpm, 40.0);
        EXPECT_LE(r.heart_rate_bpm, 180.0);
        EXPECT_GE(r.wbc_per_ul, 1000.0);
        EXPECT_LE(r.wbc_per_ul, 30000.0);
        EXPECT_EQ(r.temperature_c, std::round(r.temperature_c * 10) / 10);
    }
    const std::string text = to_jsonl(generate_cohort(Task::kNote, 400, 21));
    EXPECT_EQ(text.find("00000"), std::string::npos);
    EXPECT_EQ(text.find("99999"), std::string::npos);
}

TEST(Cohort, EmptyIsConfigError) { EXPECT_THROW(generate_cohort(Task::kSepsis, 0, 1), ConfigError); }

TEST(Cohort, JsonlRoundTrip) {
    const auto c = generate_cohort(Task::kMortality, 20, 2);
    const std::string text = to_jsonl(c);
    EXPECT_EQ(count_of(text, "\n"), 20u);
    EXPECT_EQ(from_jsonl(text), c);
    EXPECT_THROW(from_jsonl("{\"prompt\": 3}\n"), DataError);
    EXPECT_THROW(from_jsonl("not json\n"), DataError);
}

TEST(Cohort, SplitIs70_15_15AndPartitions) {
    const auto c = generate_cohort(Task::kSepsis, 200, 5);
    const CohortSplit s = split_cohort(c, 1);
    EXPECT_EQ(s.train.size(), 140u);
    EXPECT_EQ(s.val.size(), 30u);
    EXPECT_EQ(s.test.size(), 30u);
    std::multiset<std::string> all, parts;
    for (const auto& ex : c) all.insert(to_jsonl(std::span(&ex, 1)));
    for (const auto* part : {&s.train, &s.val, &s.test}) {
        for (const auto& ex : *part) parts.insert(to_jsonl(std::span(&ex, 1)));
    }
    EXPECT_EQ(all, parts);
    EXPECT_EQ(to_jsonl(split_cohort(c, 1).test), to_jsonl(s.test));
    EXPECT_THROW(split_cohort(c, 1, 0.9, 0.2), ConfigError);
}

TEST(FewShot, ZeroShotsLeavesQueryUnchanged) {
    const auto pool = generate_cohort(Task::kSepsis, 4, 1);
    EXPECT_EQ(few_shot_assemble({}, pool[0].prompt_text, 0), pool[0].prompt_text);
    EXPECT_EQ(few_shot_assemble(pool, pool[0].prompt_text, 0), pool[0].prompt_text);
}

TEST(FewShot, TwoShotsGiveTwoEarlierQuestions) {
    const auto pool = generate_cohort(Task::kSepsis, 5, 1);
    const std::string q = "Does the patient have sepsis? Answer:";
    const std::string out = few_shot_assemble(pool, pool[4].prompt_text, 2);
    EXPECT_EQ(count_of(out, q), 3u);
    EXPECT_TRUE(out.ends_with(pool[4].prompt_text));
    EXPECT_EQ(out, pool[0].prompt_text + " " + pool[0].target_text + "\n" + pool[1].prompt_text + " " +
                       pool[1].target_text + "\n" + pool[4].prompt_text);
}

TEST(FewShot, DefaultIsSixteen) {
    const auto pool = generate_cohort(Task::kMortality, 20, 8);
    const std::string out = few_shot_assemble(pool, pool[19].prompt_text);
    EXPECT_EQ(count_of(out, "Will the patient die during the hospital stay? Answer:"), 17u);
    EXPECT_EQ(kDefaultShots, 16u);
}

TEST(FewShot, Errors) {
    const auto sep = generate_cohort(Task::kSepsis, 3, 1);
    const auto mort = generate_cohort(Task::kMortality, 3, 1);
    EXPECT_THROW(few_shot_assemble(sep, sep[0].prompt_text, 4), ConfigError);
    EXPECT_THROW(few_shot_assemble(sep, mort[0].prompt_text, 2), ConfigError);
    std::vector<LabeledExample> mixed{sep[0], mort[0]};
    EXPECT_THROW(few_shot_assemble(mixed, sep[1].prompt_text, 2), ConfigError);
    EXPECT_THROW(select_shots(sep, 4, 0), ConfigError);
}

TEST(FewShot, SelectionIsSeedDeterministic) {
    const auto pool = generate_cohort(Task::kSepsis, 64, 2);
    EXPECT_EQ(select_shots(pool, 16, 3), select_shots(pool, 16, 3));
    EXPECT_NE(select_shots(pool, 16, 3), select_shots(pool, 16, 4));
    std::set<std::string> distinct;
    for (const auto& ex : select_shots(pool, 16, 3)) distinct.insert(to_jsonl(std::span(&ex, 1)));
    EXPECT_EQ(distinct.size(), 16u);
}

TEST(Tokenizer, SplitRules) {
    EXPECT_EQ(split_words("Temp 38.5 C, WBC 15000/uL\nQ?"),
              (std::vector<std::string>{"temp", "38.5", "c", ",", "wbc", "15000", "/", "ul", "\n", "q", "?"}));
    EXPECT_EQ(split_words("end. 3.x"), (std::vector<std::string>{"end", ".", "3", ".", "x"}));
    EXPECT_TRUE(split_words(" \t ").empty());
}

TEST(Tokenizer, YesIsOneOrdinaryToken) {
    const auto c = generate_cohort(Task::kSepsis, 10, 1);
    const Vocabulary v = Vocabulary::build(c);
    const auto ids = tokenize("Yes", v);
    ASSERT_EQ(ids.size(), 1u);
    EXPECT_GT(ids[0], kUnkId);
}

TEST(Tokenizer, UnknownWordIsUnk) {
    const Vocabulary v = Vocabulary::build(generate_cohort(Task::kSepsis, 10, 1));
    EXPECT_EQ(tokenize("zebra", v), (std::vector<TokenId>{kUnkId}));
}

TEST(Tokenizer, RoundTripOnCoveredText) {
    for (Task t : {Task::kSepsis, Task::kMortality, Task::kNote}) {
        const auto c = generate_cohort(t, 40, 6);
        const Vocabulary v = Vocabulary::build(c);
        for (const auto& ex : c) {
            for (const std::string& text : {ex.prompt_text, ex.target_text}) {
                std::string lower = text;
                for (auto& ch : lower) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
                EXPECT_EQ(detokenize(tokenize(text, v), v), lower);
                EXPECT_EQ(detokenize(tokenize(lower, v), v), lower);
            }
        }
    }
}

TEST(Tokenizer, FewShotPromptRoundTrips) {
    const auto pool = generate_cohort(Task::kSepsis, 5, 3);
    const Vocabulary v = Vocabulary::build(pool);
    std::string text = few_shot_assemble(pool, pool[4].prompt_text, 3);
    for (auto& ch : text) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    EXPECT_EQ(detokenize(tokenize(text, v), v), text);
}

TEST(Tokenizer, CohortVocabularyHasNoUnk) {
    for (Task t : {Task::kSepsis, Task::kMortality, Task::kNote}) {
        const auto c = generate_cohort(t, 100, 12);
        const Vocabulary v = Vocabulary::build(c);
        for (const auto& ex : c) {
            for (TokenId id : tokenize(ex.prompt_text, v)) EXPECT_NE(id, kUnkId);
            for (TokenId id : tokenize(ex.target_text, v)) EXPECT_NE(id, kUnkId);
        }
    }
}

TEST(Tokenizer, DetokenizeSkipsReservedIds) {
    const Vocabulary v = Vocabulary::build(std::vector<std::string>{"a b"});
    const auto a = v.id("a"), b = v.id("b");
    EXPECT_EQ(detokenize(std::vector<TokenId>{kBosId, a, kPadId, b, kEosId}, v), "a b");
    EXPECT_THROW(detokenize(std::vector<TokenId>{99}, v), DataError);
}

TEST(Vocabulary, ReservedIdsAndBijection) {
    const Vocabulary v = Vocabulary::build(generate_cohort(Task::kNote, 30, 1));
    EXPECT_EQ(v.token(kPadId), "<pad>");
    EXPECT_EQ(v.token(kBosId), "<bos>");
    EXPECT_EQ(v.token(kEosId), "<eos>");
    EXPECT_EQ(v.token(kUnkId), "<unk>");
    for (std::size_t i = 0; i < v.size(); ++i) {
        const auto id = static_cast<TokenId>(i);
        EXPECT_EQ(v.id(v.token(id)), id);
    }
}

TEST(Vocabulary, JsonRoundTripAndValidation) {
    const Vocabulary v = Vocabulary::build(generate_cohort(Task::kSepsis, 30, 1));
    const Vocabulary w = vocab_from_json(vocab_to_json(v));
    EXPECT_EQ(w.ids(), v.ids());
    EXPECT_THROW(vocab_from_json(R"({"<pad>":0,"<bos>":1,"<eos>":2,"x":3})"), DataError);
    EXPECT_THROW(vocab_from_json(R"({"<pad>":0,"<bos>":1,"<eos>":2,"<unk>":3,"x":5})"), DataError);
}

TEST(ParseAnswer, FirstTokenRule) {
    EXPECT_EQ(parse_answer("Yes", Task::kSepsis), Answer::kYes);
    EXPECT_EQ(parse_answer("  yes.", Task::kSepsis), Answer::kYes);
    EXPECT_EQ(parse_answer("no further action", Task::kMortality), Answer::kNo);
    EXPECT_EQ(parse_answer("NO", Task::kMortality), Answer::kNo);
    EXPECT_EQ(parse_answer("", Task::kSepsis), Answer::kUnparseable);
    EXPECT_EQ(parse_answer("maybe yes", Task::kSepsis), Answer::kUnparseable);
    EXPECT_EQ(parse_answer("yesterday", Task::kSepsis), Answer::kUnparseable);
    EXPECT_THROW(parse_answer("Yes", Task::kNote), UsageError);
}

TEST(ParseAnswer, GoldMatchesTarget) {
    for (const auto& ex : generate_cohort(Task::kSepsis, 20, 1)) {
        EXPECT_EQ(gold_answer(ex), ex.target_text == "Yes" ? Answer::kYes : Answer::kNo);
        EXPECT_EQ(parse_answer(ex.target_text, ex.task), gold_answer(ex));
    }
}

TEST(Tasks, NameRoundTrip) {
    for (Task t : {Task::kSepsis, Task::kMortality, Task::kNote}) EXPECT_EQ(parse_task(to_string(t)), t);
    EXPECT_THROW(parse_task("icu"), ConfigError);
}

}  // namespace
}  // namespace peftlab
