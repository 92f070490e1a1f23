#include "privsim/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "privsim/errors.hpp"
#include "privsim/kernels.hpp"
#include "privsim/random.hpp"

namespace privsim {

using nlohmann::json;

double individual_accuracy(std::span<const PredictionRecord> records) {
    std::size_t scorable = 0;
    std::size_t correct = 0;
    for (const auto& r : records) {
        if (r.error() || !r.truth) continue;
        ++scorable;
        if (r.correct()) ++correct;
    }
    if (scorable == 0) throw NoScorable("no scorable prediction records");
    return static_cast<double>(correct) / static_cast<double>(scorable);
}

double macro_accuracy(std::span<const double> accs) {
    if (accs.empty()) throw EmptySample("macro accuracy of no respondents");
    double sum = 0.0;
    for (double a : accs) sum += a;
    return sum / static_cast<double>(accs.size());
}

AnswerDistribution distribution(std::span<const int> values, int m, std::string question_id) {
    if (m < 1) throw SupportMismatch("support size must be positive");
    if (values.empty()) throw EmptySample("empty sample for question '" + question_id + "'");
    AnswerDistribution d;
    d.question_id = std::move(question_id);
    d.pmf.assign(static_cast<std::size_t>(m), 0.0);
    for (int v : values) {
        if (v < 1 || v > m) {
            throw AnswerDomainError("value " + std::to_string(v) + " outside 1.." + std::to_string(m));
        }
        d.pmf[v - 1] += 1.0;
    }
    for (auto& p : d.pmf) p /= static_cast<double>(values.size());
    d.support_count = values.size();
    return d;
}

namespace {

void check_support(const AnswerDistribution& p, const AnswerDistribution& q) {
    if (p.m() != q.m()) {
        throw SupportMismatch("support sizes differ: " + std::to_string(p.m()) + " vs " + std::to_string(q.m()));
    }
}

double mean_of(std::span<const int> v) {
    double s = 0.0;
    for (int x : v) s += x;
    return s / static_cast<double>(v.size());
}

}  // namespace

double tvd(const AnswerDistribution& p, const AnswerDistribution& q) {
    check_support(p, q);
    double s = 0.0;
    for (std::size_t a = 0; a < p.m(); ++a) s += std::abs(p.pmf[a] - q.pmf[a]);
    return 0.5 * s;
}

double tv_complement(const AnswerDistribution& p, const AnswerDistribution& q) { return 1.0 - tvd(p, q); }

double wasserstein(const AnswerDistribution& p, const AnswerDistribution& q) {
    check_support(p, q);
    double cp = 0.0, cq = 0.0, s = 0.0;
    for (std::size_t v = 0; v < p.m(); ++v) {
        cp += p.pmf[v];
        cq += q.pmf[v];
        s += std::abs(cp - cq);
    }
    return s;
}

double mee(std::span<const int> truth_values, std::span<const int> pred_values) {
    if (truth_values.empty() || pred_values.empty()) throw EmptySample("mean estimation error of an empty sample");
    const double mu = mean_of(truth_values);
    return 100.0 * std::abs(mean_of(pred_values) - mu) / mu;
}

MacroAverage macro_average(const std::map<std::string, std::optional<double>>& per_question) {
    MacroAverage out;
    double sum = 0.0;
    for (const auto& [_, v] : per_question) {
        if (!v) {
            ++out.skipped;
            continue;
        }
        sum += *v;
        ++out.used;
    }
    if (out.used == 0) throw AllSkipped("every question was skipped");
    out.value = sum / static_cast<double>(out.used);
    return out;
}

double quantile_sorted(std::span<const double> sorted, double p) {
    if (sorted.empty()) throw EmptySample("quantile of an empty sample");
    const double h = (static_cast<double>(sorted.size()) - 1.0) * std::clamp(p, 0.0, 1.0);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    if (lo + 1 >= sorted.size()) return sorted[lo];
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

namespace {

Interval percentile_interval(std::vector<double> replicates, double level) {
    std::sort(replicates.begin(), replicates.end());
    const double alpha = (1.0 - level) / 2.0;
    return {quantile_sorted(replicates, alpha), quantile_sorted(replicates, 1.0 - alpha)};
}

void check_bootstrap_args(std::size_t n_units, int n_resamples, double level) {
    if (n_units < 2) throw TooFewUnits("bootstrap needs at least 2 units, got " + std::to_string(n_units));
    if (n_resamples < 1) throw ConfigError("bootstrap needs at least one resample");
    if (!(level > 0.0 && level < 1.0)) throw ConfigError("confidence level must be in (0, 1)");
}

}  // namespace

Interval bootstrap_ci(std::span<const double> unit_values, int n_resamples, double level, std::uint64_t seed) {
    check_bootstrap_args(unit_values.size(), n_resamples, level);
    return percentile_interval(kernels::bootstrap_means_omp(unit_values, n_resamples, seed), level);
}

Interval bootstrap_ci(std::size_t n_units, const ResampleStatistic& statistic, int n_resamples, double level,
                      std::uint64_t seed) {
    check_bootstrap_args(n_units, n_resamples, level);
    std::vector<double> replicates(static_cast<std::size_t>(n_resamples));
    std::vector<std::size_t> idx(n_units);
    for (int b = 0; b < n_resamples; ++b) {
        std::mt19937_64 rng(derive_seed(seed, "resample", static_cast<std::uint64_t>(b)));
        std::uniform_int_distribution<std::size_t> pick(0, n_units - 1);
        for (auto& i : idx) i = pick(rng);
        replicates[b] = statistic(idx);
    }
    return percentile_interval(std::move(replicates), level);
}

QuestionMetrics question_metrics(const QuestionSample& s) {
    QuestionMetrics out;
    out.question_id = s.question_id;
    out.n_truth = s.truth.size();
    out.n_pred = s.pred.size();
    if (s.truth.empty() || s.pred.empty() || s.m < 1) return out;
    try {
        const auto p = distribution(s.truth, s.m, s.question_id);
        const auto q = distribution(s.pred, s.m, s.question_id);
        out.tvd = tvd(p, q);
        out.tv_complement = 1.0 - *out.tvd;
        out.wd = wasserstein(p, q);
        out.mee = mee(s.truth, s.pred);
    } catch (const Error&) {
        out = QuestionMetrics{s.question_id, s.truth.size(), s.pred.size(), {}, {}, {}, {}};
    }
    return out;
}

double ConditionReport::parse_failure_rate() const noexcept {
    const auto total = scorable + unparseable;
    return total == 0 ? 0.0 : static_cast<double>(unparseable) / static_cast<double>(total);
}

std::optional<MetricValue> ConditionReport::metric(std::string_view name) const {
    if (name == "acc") return acc;
    if (name == "tvd") return tvd;
    if (name == "tv_complement") return tv_complement;
    if (name == "mee") return mee;
    if (name == "wd") return wd;
    throw ConfigError("unknown metric '" + std::string(name) + "'");
}

const ConditionReport* FidelityReport::find(std::string_view condition) const {
    for (const auto& c : conditions) {
        if (c.condition == condition) return &c;
    }
    return nullptr;
}

namespace {

json to_json(const std::optional<MetricValue>& m) {
    if (!m) return nullptr;
    json j{{"value", m->value}};
    if (m->ci) {
        j["ci_lo"] = m->ci->lo;
        j["ci_hi"] = m->ci->hi;
    }
    return j;
}

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

MetricValue with_ci(double value, std::span<const double> units, const BootstrapSettings& bs,
                    const std::string& label) {
    MetricValue mv{value, std::nullopt};
    if (units.size() >= 2) {
        const auto seed = derive_seed(bs.seed, "bootstrap:" + label);
        auto reps = bs.parallel ? kernels::bootstrap_means_omp(units, bs.resamples, seed)
                                : kernels::bootstrap_means_serial(units, bs.resamples, seed);
        mv.ci = percentile_interval(std::move(reps), bs.level);
    }
    return mv;
}

void fill_population(ConditionReport& rep, std::vector<QuestionSample> samples, const BootstrapSettings& bs) {
    rep.per_question = bs.parallel ? kernels::question_metrics_omp(samples) : kernels::question_metrics_serial(samples);
    std::vector<double> tvds, mees, wds;
    for (const auto& q : rep.per_question) {
        if (q.skipped()) {
            ++rep.questions_skipped;
            continue;
        }
        tvds.push_back(*q.tvd);
        mees.push_back(*q.mee);
        wds.push_back(*q.wd);
    }
    if (tvds.empty()) return;
    auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    rep.tvd = with_ci(mean(tvds), tvds, bs, rep.condition + ":tvd");
    rep.tv_complement = MetricValue{1.0 - rep.tvd->value, std::nullopt};
    if (rep.tvd->ci) rep.tv_complement->ci = Interval{1.0 - rep.tvd->ci->hi, 1.0 - rep.tvd->ci->lo};
    rep.mee = with_ci(mean(mees), mees, bs, rep.condition + ":mee");
    rep.wd = with_ci(mean(wds), wds, bs, rep.condition + ":wd");
}

std::vector<std::string> questions_in_column_order(std::span<const PredictionRecord> records, const SurveyDataset& ds) {
    std::vector<std::string> ids;
    for (const auto& r : records) ids.push_back(r.question_id);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    ds.sort_by_column(ids);
    return ids;
}

}  // namespace

json to_json(const ConditionReport& r) {
    json pq = json::array();
    for (const auto& q : r.per_question) {
        pq.push_back({{"question_id", q.question_id},
                      {"n_truth", q.n_truth},
                      {"n_pred", q.n_pred},
                      {"tvd", opt(q.tvd)},
                      {"tv_complement", opt(q.tv_complement)},
                      {"mee", opt(q.mee)},
                      {"wd", opt(q.wd)}});
    }
    json accs = json::object();
    for (const auto& [id, a] : r.per_respondent_acc) accs[id] = a;
    return {{"condition", r.condition},
            {"acc", to_json(r.acc)},
            {"tvd", to_json(r.tvd)},
            {"tv_complement", to_json(r.tv_complement)},
            {"mee", to_json(r.mee)},
            {"wd", to_json(r.wd)},
            {"questions_skipped", r.questions_skipped},
            {"respondents_unscored", r.respondents_unscored},
            {"scorable", r.scorable},
            {"unparseable", r.unparseable},
            {"parse_failure_rate", r.parse_failure_rate()},
            {"per_respondent_acc", accs},
            {"per_question", pq}};
}

json to_json(const FidelityReport& r) {
    json conds = json::array();
    for (const auto& c : r.conditions) conds.push_back(to_json(c));
    return {{"metadata", r.metadata}, {"conditions", conds}};
}

ConditionReport condition_report(const std::string& condition, std::span<const PredictionRecord> records,
                                 const SurveyDataset& ds, const BootstrapSettings& bs) {
    ConditionReport rep;
    rep.condition = condition;

    std::map<std::string, std::vector<PredictionRecord>> by_respondent;
    for (const auto& r : records) {
        if (r.error()) ++rep.unparseable;
        else ++rep.scorable;
        by_respondent[r.respondent_id].push_back(r);
    }
    std::vector<double> accs;
    for (const auto& [id, recs] : by_respondent) {
        try {
            const double a = individual_accuracy(recs);
            rep.per_respondent_acc[id] = a;
            accs.push_back(a);
        } catch (const NoScorable&) {
            ++rep.respondents_unscored;
        }
    }
    if (!accs.empty()) rep.acc = with_ci(macro_accuracy(accs), accs, bs, condition + ":acc");

    std::map<std::string, QuestionSample> by_question;
    for (const auto& id : questions_in_column_order(records, ds)) {
        by_question[id] = QuestionSample{id, static_cast<int>(ds.question(id).size()), {}, {}};
    }
    for (const auto& r : records) {
        if (r.error() || !r.truth) continue;
        const auto& q = ds.question(r.question_id);
        auto& s = by_question[r.question_id];
        s.truth.push_back(answer_to_numeric(q, *r.truth));
        s.pred.push_back(answer_to_numeric(q, *r.predicted));
    }
    std::vector<QuestionSample> samples;
    for (const auto& id : questions_in_column_order(records, ds)) samples.push_back(std::move(by_question[id]));
    fill_population(rep, std::move(samples), bs);
    return rep;
}

ConditionReport population_report_random_split(const std::string& condition,
                                               std::span<const PredictionRecord> records,
                                               std::span<const QuestionSplit> splits, const SurveyDataset& ds,
                                               const BootstrapSettings& bs) {
    std::map<std::string, const QuestionSplit*> split_of;
    for (const auto& s : splits) split_of[s.respondent_id] = &s;
    std::vector<PredictionRecord> kept;
    for (const auto& r : records) {
        auto it = split_of.find(r.respondent_id);
        if (it != split_of.end() && it->second->in_eval(r.question_id)) kept.push_back(r);
    }
    return condition_report(condition, kept, ds, bs);
}

ConditionReport transfer_report(const std::string& condition, std::span<const PredictionRecord> records,
                                const SurveyDataset& target, const BootstrapSettings& bs) {
    ConditionReport rep;
    rep.condition = condition;
    std::map<std::string, std::vector<int>> preds;
    for (const auto& r : records) {
        if (r.error()) {
            ++rep.unparseable;
            continue;
        }
        ++rep.scorable;
        preds[r.question_id].push_back(answer_to_numeric(target.question(r.question_id), *r.predicted));
    }
    std::vector<QuestionSample> samples;
    for (const auto& id : questions_in_column_order(records, target)) {
        const auto& q = target.question(id);
        QuestionSample s{id, static_cast<int>(q.size()), {}, preds[id]};
        for (const auto& resp : target.respondents()) {
            if (const auto* a = resp.find(id)) s.truth.push_back(answer_to_numeric(q, *a));
        }
        samples.push_back(std::move(s));
    }
    fill_population(rep, std::move(samples), bs);
    return rep;
}

}  // namespace privsim
