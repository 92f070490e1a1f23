#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "privsim/dataset.hpp"
#include "privsim/prediction.hpp"

namespace privsim {

/// Empirical pmf over the 1-based answer values 1..m.
struct AnswerDistribution {
    std::string question_id;
    std::vector<double> pmf;
    std::size_t support_count = 0;

    std::size_t m() const noexcept { return pmf.size(); }
};

/// Fraction of correct records among scorable ones. Throws NoScorable.
double individual_accuracy(std::span<const PredictionRecord> records);

/// Unweighted mean of per-respondent accuracies. Throws EmptySample.
double macro_accuracy(std::span<const double> accs);

/// Throws EmptySample on no values, AnswerDomainError on values outside 1..m.
AnswerDistribution distribution(std::span<const int> values, int m, std::string question_id = {});

double tvd(const AnswerDistribution& p, const AnswerDistribution& q);  // throws SupportMismatch
double tv_complement(const AnswerDistribution& p, const AnswerDistribution& q);
double wasserstein(const AnswerDistribution& p, const AnswerDistribution& q);  // throws SupportMismatch

/// 100 * |mean(pred) - mean(truth)| / mean(truth). The two samples may
/// differ in size. Throws EmptySample.
double mee(std::span<const int> truth_values, std::span<const int> pred_values);

struct MacroAverage {
    double value = 0.0;
    std::size_t used = 0;
    std::size_t skipped = 0;
};

/// Mean over questions with a value; nullopt entries are counted as skipped.
/// Throws AllSkipped.
MacroAverage macro_average(const std::map<std::string, std::optional<double>>& per_question);

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
};

/// Percentile interval of the sample mean, resampling `unit_values`.
Interval bootstrap_ci(std::span<const double> unit_values, int n_resamples = 1000, double level = 0.95,
                      std::uint64_t seed = 0);

/// Same for an arbitrary statistic of a resample, given as unit indices.
using ResampleStatistic = std::function<double(std::span<const std::size_t>)>;
Interval bootstrap_ci(std::size_t n_units, const ResampleStatistic& statistic, int n_resamples = 1000,
                      double level = 0.95, std::uint64_t seed = 0);

/// Linear-interpolated quantile of sorted data.
double quantile_sorted(std::span<const double> sorted, double p);

struct QuestionMetrics {
    std::string question_id;
    std::size_t n_truth = 0;
    std::size_t n_pred = 0;
    std::optional<double> tvd;
    std::optional<double> tv_complement;
    std::optional<double> mee;
    std::optional<double> wd;

    bool skipped() const noexcept { return !tvd.has_value(); }
};

/// Paired-or-not answer samples of one question, in 1-based values.
struct QuestionSample {
    std::string question_id;
    int m = 0;
    std::vector<int> truth;
    std::vector<int> pred;
};

/// Empty samples produce a skipped row rather than an error.
QuestionMetrics question_metrics(const QuestionSample& s);

struct BootstrapSettings {
    int resamples = 1000;
    double level = 0.95;
    std::uint64_t seed = 0;
    bool parallel = true;
};

struct MetricValue {
    double value = 0.0;
    std::optional<Interval> ci;  // absent with fewer than two units
};

struct ConditionReport {
    std::string condition;
    std::vector<QuestionMetrics> per_question;
    std::map<std::string, double> per_respondent_acc;
    std::optional<MetricValue> acc;
    std::optional<MetricValue> tvd;
    std::optional<MetricValue> tv_complement;
    std::optional<MetricValue> mee;
    std::optional<MetricValue> wd;
    std::size_t questions_skipped = 0;
    std::size_t respondents_unscored = 0;
    std::size_t scorable = 0;
    std::size_t unparseable = 0;

    double parse_failure_rate() const noexcept;
    std::optional<MetricValue> metric(std::string_view name) const;  // acc, tvd, tv_complement, mee, wd
};

struct FidelityReport {
    std::vector<ConditionReport> conditions;
    nlohmann::json metadata = nlohmann::json::object();

    const ConditionReport* find(std::string_view condition) const;
};

nlohmann::json to_json(const ConditionReport& r);
nlohmann::json to_json(const FidelityReport& r);

/// Individual and population metrics for one condition. For every question
/// the true and predicted samples are drawn from the same respondents: those
/// whose records carry both a truth and a parsed prediction.
ConditionReport condition_report(const std::string& condition, std::span<const PredictionRecord> records,
                                 const SurveyDataset& ds, const BootstrapSettings& bootstrap);

/// Keeps only records whose question lies in that respondent's evaluation
/// set, then aggregates per unique evaluation question.
ConditionReport population_report_random_split(const std::string& condition,
                                               std::span<const PredictionRecord> records,
                                               std::span<const QuestionSplit> splits, const SurveyDataset& ds,
                                               const BootstrapSettings& bootstrap);

/// Predicted distributions from transferred personas against the target's
/// full answered population. No individual accuracy.
ConditionReport transfer_report(const std::string& condition, std::span<const PredictionRecord> records,
                                const SurveyDataset& target, const BootstrapSettings& bootstrap);

}  // namespace privsim
