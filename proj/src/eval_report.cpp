#include "peftlab/eval_report.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "peftlab/errors.h"

namespace peftlab {

namespace {

std::string fixed(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    std::string s = buf;
    if (s == "-0.0" || s == "-0.00") s.erase(0, 1);
    return s;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

}  // namespace

double accuracy(std::span<const Answer> predictions, std::span<const Answer> gold) {
    if (predictions.size() != gold.size()) {
        throw UsageError("accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                         std::to_string(gold.size()) + " gold labels");
    }
    if (gold.empty()) throw UsageError("accuracy: empty label lists");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        if (predictions[i] != Answer::kUnparseable && predictions[i] == gold[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(gold.size());
}

double note_overlap_score(std::string_view generated, std::string_view reference) {
    const auto ref = split_words(reference);
    if (ref.empty()) throw UsageError("note_overlap_score: empty reference");
    const auto gen = split_words(generated);
    if (gen.empty()) return 0.0;
    std::map<std::string, std::size_t> counts;
    for (const auto& w : ref) ++counts[w];
    std::size_t overlap = 0;
    for (const auto& w : gen) {
        auto it = counts.find(w);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    if (overlap == 0) return 0.0;
    const double p = static_cast<double>(overlap) / static_cast<double>(gen.size());
    const double r = static_cast<double>(overlap) / static_cast<double>(ref.size());
    return 100.0 * 2.0 * p * r / (p + r);
}

MetricResult aggregate(std::span<const double> values, std::string metric_name) {
    if (values.empty()) throw UsageError("aggregate: no values");
    std::vector<double> v(values.begin(), values.end());
    std::sort(v.begin(), v.end());
    double sum = 0.0;
    for (double x : v) sum += x;
    const double mean = sum / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    MetricResult r;
    r.mean = mean;
    r.std = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    r.n_seeds = v.size();
    r.metric_name = std::move(metric_name);
    return r;
}

double round1(double v) { return std::round(v * 10.0) / 10.0; }

double avg_column(double sepsis, double mortality, double note) {
    if (std::isnan(sepsis) || std::isnan(mortality) || std::isnan(note)) return std::nan("");
    return round1((sepsis + mortality + note) / 3.0);
}

std::string method_display_name(AdapterMethod m) {
    switch (m) {
        case AdapterMethod::kLora: return "LoRA";
        case AdapterMethod::kAdaLora: return "AdaLoRA";
        case AdapterMethod::kIa3: return "(IA)3";
    }
    return "?";
}

RunRow make_row(std::string method, std::string config, double trainable_pct, MetricResult sepsis,
                MetricResult mortality, MetricResult note) {
    RunRow r;
    r.method = std::move(method);
    r.config = std::move(config);
    r.trainable_pct = trainable_pct;
    auto mean_or_nan = [](const MetricResult& m) { return m.n_seeds == 0 ? std::nan("") : m.mean; };
    r.avg = avg_column(mean_or_nan(sepsis), mean_or_nan(mortality), mean_or_nan(note));
    r.sepsis_acc = std::move(sepsis);
    r.mortality_acc = std::move(mortality);
    r.note_score = std::move(note);
    return r;
}

ReportFormat parse_report_format(const std::string& s) {
    if (s == "markdown" || s == "md") return ReportFormat::kMarkdown;
    if (s == "csv") return ReportFormat::kCsv;
    throw ConfigError("unknown report format '" + s + "' (expected markdown or csv)");
}

std::string format_metric(const MetricResult& m) {
    if (m.n_seeds == 0) return "n/a";
    return fixed(round1(m.mean), 1) + " ±" + fixed(round1(m.std), 1);
}

std::string emit_report(std::span<const RunRow> rows, ReportFormat format) {
    const std::vector<std::string> header{"Method",        "Config", "Params(%)", "Sepsis Acc",
                                          "Mortality Acc", std::string(kNoteColumn), "Avg"};
    std::vector<std::vector<std::string>> cells;
    for (const auto& r : rows) {
        cells.push_back({r.method, r.config, fixed(r.trainable_pct, 2), format_metric(r.sepsis_acc),
                         format_metric(r.mortality_acc), format_metric(r.note_score),
                         std::isnan(r.avg) ? "n/a" : fixed(r.avg, 1)});
    }
    std::string out;
    if (format == ReportFormat::kCsv) {
        auto line = [&](const std::vector<std::string>& fields) {
            for (std::size_t i = 0; i < fields.size(); ++i) {
                if (i) out += ',';
                out += csv_field(fields[i]);
            }
            out += '\n';
        };
        line(header);
        for (const auto& c : cells) line(c);
        return out;
    }
    // Bold the displayed maxima of the four score columns.
    // n/a cells are NaN and never bold.
    auto displayed = [&](const RunRow& r, int col) {
        auto shown = [](const MetricResult& m) { return m.n_seeds == 0 ? std::nan("") : round1(m.mean); };
        switch (col) {
            case 3: return shown(r.sepsis_acc);
            case 4: return shown(r.mortality_acc);
            case 5: return shown(r.note_score);
            default: return round1(r.avg);
        }
    };
    for (int col = 3; col <= 6; ++col) {
        double best = -INFINITY;
        for (const auto& r : rows) {
            const double v = displayed(r, col);
            if (!std::isnan(v)) best = std::max(best, v);
        }
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (displayed(rows[i], col) == best) cells[i][col] = "**" + cells[i][col] + "**";
        }
    }
    auto line = [&](const std::vector<std::string>& fields) {
        out += '|';
        for (const auto& f : fields) out += ' ' + f + " |";
        out += '\n';
    };
    line(header);
    out += "|---|---|---:|---:|---:|---:|---:|\n";
    for (const auto& c : cells) line(c);
    return out;
}

}  // namespace peftlab
