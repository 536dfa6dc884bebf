#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "peftlab/adapters.h"
#include "peftlab/icu_tasks.h"

namespace peftlab {

struct MetricResult {
    double mean = 0.0;
    double std = 0.0;  // sample (n-1) standard deviation; 0 for one seed
    std::size_t n_seeds = 0;  // 0 marks a task that was not run
    std::string metric_name;
};

// One report line. Metric means are on the 0-100 scale.
struct RunRow {
    std::string method;
    std::string config;
    double trainable_pct = 0.0;
    MetricResult sepsis_acc, mortality_acc, note_score;
    double avg = 0.0;  // NaN unless all three tasks have results
};

// Fraction of positions where prediction equals gold; Unparseable never
// matches. Throws UsageError on empty or mismatched lists.
double accuracy(std::span<const Answer> predictions, std::span<const Answer> gold);

// 100 x unigram F1 between the token multisets of the two texts. Throws
// UsageError when the reference has no tokens.
double note_overlap_score(std::string_view generated, std::string_view reference);

// Mean and sample std. Values are summed in sorted order so the result does
// not depend on input order. Throws UsageError on an empty list.
MetricResult aggregate(std::span<const double> values, std::string metric_name = {});

// Mean of the three task scores rounded to one decimal; NaN if any is NaN.
double avg_column(double sepsis, double mortality, double note);

// Rounds half away from zero to one decimal.
double round1(double v);

std::string method_display_name(AdapterMethod m);

RunRow make_row(std::string method, std::string config, double trainable_pct, MetricResult sepsis,
                MetricResult mortality, MetricResult note);

enum class ReportFormat { kMarkdown, kCsv };
ReportFormat parse_report_format(const std::string& s);  // throws ConfigError

inline constexpr std::string_view kNoteColumn = "NoteScore(F1-proxy)";

// Method | Config | Params(%) | Sepsis Acc | Mortality Acc | NoteScore(F1-proxy) | Avg.
// Metric cells read "mean ±std". Markdown bolds every cell whose displayed
// mean equals its column maximum.
std::string emit_report(std::span<const RunRow> rows, ReportFormat format);

// "mean ±std" with one decimal each, or "n/a" when n_seeds is 0.
std::string format_metric(const MetricResult& m);

}  // namespace peftlab
