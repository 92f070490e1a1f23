#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "privsim/metrics.hpp"

namespace privsim {

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

std::string format_number(double v);  // fixed, 6 decimals
std::string format_number(const std::optional<double>& v);  // empty when absent

std::string to_csv(const Table& t);
void write_csv(const std::filesystem::path& path, const Table& t);

inline const std::vector<std::string> kSummaryMetrics = {"acc", "tv_complement", "tvd", "mee", "wd"};

/// One row per condition; each metric contributes value, lo and hi columns.
Table summary_table(const FidelityReport& report, std::span<const std::string> metrics = kSummaryMetrics);
Table per_question_table(const FidelityReport& report);

struct TokenRow {
    std::string dataset;
    std::string tokenizer;
    double raw = 0.0;
    double narrative = 0.0;
};

/// Columns: dataset, tokenizer, Raw, Narrative, %Reduction.
Table token_table(std::span<const TokenRow> rows);

struct TemplateShare {
    std::string templ;
    std::size_t wins = 0;
    double fraction = 0.0;
};

Table best_template_table(std::span<const TemplateShare> shares);

struct SweepPoint {
    int iterations = 0;
    ConditionReport report;
};

Table sweep_table(std::span<const SweepPoint> points);

struct Bar {
    std::string label;
    double value = 0.0;
    std::optional<Interval> ci;
};

/// Static SVG bar chart with optional CI whiskers.
std::string bar_chart_svg(const std::string& title, const std::string& y_label, std::span<const Bar> bars,
                          double y_max = 1.0);

}  // namespace privsim
