#include "privsim/prediction.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "privsim/digest.hpp"
#include "privsim/errors.hpp"

namespace privsim {

using nlohmann::json;

std::string Condition::label() const {
    switch (kind) {
        case ConditionKind::baseline: return "baseline";
        case ConditionKind::raw: return "raw";
        case ConditionKind::persona: return "persona:" + std::string(to_string(templ));
    }
    return "baseline";
}

Condition Condition::parse(std::string_view label) {
    if (label == "baseline") return {ConditionKind::baseline, GenerationTemplate::basic};
    if (label == "raw") return {ConditionKind::raw, GenerationTemplate::basic};
    if (label == "persona") return {ConditionKind::persona, GenerationTemplate::basic};
    if (label.starts_with("persona:")) {
        return {ConditionKind::persona, generation_template_from_string(label.substr(8))};
    }
    throw ConfigError("unknown condition '" + std::string(label) + "'");
}

PredictionTemplate Condition::prompt_kind() const {
    switch (kind) {
        case ConditionKind::baseline: return PredictionTemplate::baseline;
        case ConditionKind::raw: return PredictionTemplate::raw;
        case ConditionKind::persona: return PredictionTemplate::persona;
    }
    return PredictionTemplate::baseline;
}

json to_json(const PredictionRecord& r) {
    return {{"respondent_id", r.respondent_id},
            {"question_id", r.question_id},
            {"condition", r.condition},
            {"predicted", r.predicted ? json(*r.predicted) : json(nullptr)},
            {"truth", r.truth ? json(*r.truth) : json(nullptr)},
            {"prompt_digest", r.prompt_digest},
            {"retries_used", r.retries_used},
            {"raw_output", r.raw_output}};
}

PredictionRecord prediction_from_json(const json& j) {
    PredictionRecord r;
    r.respondent_id = j.at("respondent_id").get<std::string>();
    r.question_id = j.at("question_id").get<std::string>();
    r.condition = j.at("condition").get<std::string>();
    if (!j.at("predicted").is_null()) r.predicted = j.at("predicted").get<std::string>();
    if (j.contains("truth") && !j.at("truth").is_null()) r.truth = j.at("truth").get<std::string>();
    r.prompt_digest = j.value("prompt_digest", std::string{});
    r.retries_used = j.value("retries_used", 0);
    r.raw_output = j.value("raw_output", std::string{});
    return r;
}

void write_predictions(const std::filesystem::path& path, std::span<const PredictionRecord> records) {
    std::string body;
    for (const auto& r : records) body += to_json(r).dump() + '\n';
    write_file(path, body);
}

std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<PredictionRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) out.push_back(prediction_from_json(json::parse(line)));
    }
    return out;
}

double Evaluation::unscorable_fraction() const noexcept {
    const auto total = scorable + unparseable;
    return total == 0 ? 0.0 : static_cast<double>(unparseable) / static_cast<double>(total);
}

Evaluation summarize(std::vector<PredictionRecord> records) {
    Evaluation ev;
    for (const auto& r : records) {
        if (r.error()) {
            ++ev.unparseable;
            continue;
        }
        ++ev.scorable;
        if (r.correct()) ++ev.correct;
    }
    if (ev.scorable > 0) ev.accuracy = static_cast<double>(ev.correct) / static_cast<double>(ev.scorable);
    ev.predictions = std::move(records);
    return ev;
}

Predictor::Predictor(llm::Gateway& gateway, ModelSettings settings)
    : gateway_(gateway), settings_(std::move(settings)) {}

llm::ModelRequest Predictor::request_for(const Condition& condition, const std::optional<std::string>& text,
                                         const QuestionSpec& q, const std::string& tag) const {
    const auto prompt = render_prediction_prompt(condition.prompt_kind(), text, q.text, q.answers);
    llm::ModelRequest req;
    req.role = llm::Role::prediction;
    req.model_id = settings_.prediction_model;
    req.prompt = prompt.text;
    req.temperature = settings_.prediction_temperature;
    req.max_output = settings_.max_output;
    req.request_tag = tag;
    return req;
}

namespace {

std::vector<PredictionRecord> run_predictions(llm::Gateway& gateway, int max_retries,
                                              std::vector<llm::ModelRequest> requests,
                                              std::vector<const QuestionSpec*> questions,
                                              std::vector<PredictionRecord> out) {
    std::vector<std::size_t> pending(out.size());
    for (std::size_t i = 0; i < pending.size(); ++i) {
        pending[i] = i;
        out[i].prompt_digest = sha256_hex(requests[i].prompt);
    }
    for (int attempt = 0; attempt <= max_retries && !pending.empty(); ++attempt) {
        std::vector<std::pair<llm::ModelRequest, int>> batch;
        batch.reserve(pending.size());
        for (auto i : pending) batch.emplace_back(requests[i], attempt);
        auto results = gateway.complete_many(batch);
        for (const auto& res : results) {
            if (!res.ok()) std::rethrow_exception(res.error);
        }
        std::vector<std::size_t> still;
        for (std::size_t k = 0; k < pending.size(); ++k) {
            auto& rec = out[pending[k]];
            rec.raw_output = results[k].response->text;
            rec.retries_used = attempt;
            try {
                rec.predicted = parse_answer(rec.raw_output, questions[pending[k]]->answers);
            } catch (const UnparseableAnswer&) {
                still.push_back(pending[k]);
            }
        }
        pending = std::move(still);
    }
    return out;
}

}  // namespace

PredictionRecord Predictor::predict(const Condition& condition, const std::optional<std::string>& text,
                                    const QuestionSpec& q, const std::string& respondent_id,
                                    const std::optional<std::string>& truth) {
    PredictionRecord rec;
    rec.respondent_id = respondent_id;
    rec.question_id = q.id;
    rec.condition = condition.label();
    rec.truth = truth;
    auto req = request_for(condition, text, q, "predict:" + rec.condition + ":" + respondent_id + ":" + q.id);
    return run_predictions(gateway_, settings_.max_parse_retries, {std::move(req)}, {&q}, {std::move(rec)}).front();
}

std::vector<PredictionRecord> Predictor::predict_many(const Condition& condition,
                                                      const std::optional<std::string>& text,
                                                      const SurveyDataset& ds,
                                                      std::span<const std::string> question_ids,
                                                      const ResponseSet& responses) {
    std::vector<llm::ModelRequest> reqs;
    std::vector<const QuestionSpec*> qs;
    std::vector<PredictionRecord> out;
    const auto label = condition.label();
    for (const auto& id : question_ids) {
        const auto& q = ds.question(id);
        PredictionRecord rec;
        rec.respondent_id = responses.respondent_id;
        rec.question_id = id;
        rec.condition = label;
        if (const auto* truth = responses.find(id)) rec.truth = *truth;
        reqs.push_back(request_for(condition, text, q, "predict:" + label + ":" + responses.respondent_id + ":" + id));
        qs.push_back(&q);
        out.push_back(std::move(rec));
    }
    return run_predictions(gateway_, settings_.max_parse_retries, std::move(reqs), std::move(qs), std::move(out));
}

std::vector<PredictionRecord> Predictor::predict_many(const Condition& condition,
                                                      const std::optional<std::string>& text,
                                                      const SurveyDataset& ds,
                                                      std::span<const std::string> question_ids,
                                                      const std::string& respondent_id) {
    ResponseSet none;
    none.respondent_id = respondent_id;
    return predict_many(condition, text, ds, question_ids, none);
}

std::string_view to_string(CalibrationMode m) {
    return m == CalibrationMode::held_out_calibration ? "held_out_calibration" : "oracle_eval";
}

CalibrationMode calibration_mode_from_string(std::string_view s) {
    if (s == "held_out_calibration" || s == "held_out") return CalibrationMode::held_out_calibration;
    if (s == "oracle_eval" || s == "oracle") return CalibrationMode::oracle_eval;
    throw ConfigError("unknown calibration mode '" + std::string(s) + "'");
}

GenerationTemplate select_template(const std::map<GenerationTemplate, double>& acc) {
    if (acc.empty()) throw NoScorableQuestions("no template produced a scorable calibration result");
    auto best = acc.begin();
    for (auto it = std::next(acc.begin()); it != acc.end(); ++it) {
        if (it->second > best->second) best = it;  // strict: earlier template wins ties
    }
    return best->first;
}

CalibrationChoice calibrate_select(const std::map<GenerationTemplate, std::string>& personas,
                                   const SurveyDataset& ds, std::span<const std::string> calib_ids,
                                   const ResponseSet& responses, CalibrationMode mode, Predictor& predictor) {
    if (personas.empty()) throw ConfigError("calibrate_select needs at least one persona");
    if (calib_ids.empty()) throw NoScorableQuestions("empty calibration set for " + responses.respondent_id);
    CalibrationChoice choice;
    choice.respondent_id = responses.respondent_id;
    choice.mode = mode;
    for (const auto& [templ, text] : personas) {
        auto ev = summarize(predictor.predict_many({ConditionKind::persona, templ}, text, ds, calib_ids, responses));
        if (ev.accuracy) choice.per_template_acc[templ] = *ev.accuracy;
    }
    choice.chosen_template = select_template(choice.per_template_acc);
    return choice;
}

std::vector<std::string> choose_calibration_questions(const SurveyDataset& ds, std::span<const std::string> eval_ids,
                                                      double fraction, int min_questions, std::uint64_t seed) {
    const auto n = eval_ids.size();
    if (n < 2) return {};
    auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 0.5));
    k = std::max(k, static_cast<std::size_t>(std::max(0, min_questions)));
    k = std::min(k, n - 1);
    std::vector<std::string> pool(eval_ids.begin(), eval_ids.end());
    std::mt19937_64 rng(seed);
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(k);
    ds.sort_by_column(pool);
    return pool;
}

}  // namespace privsim
