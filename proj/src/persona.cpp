#include "privsim/persona.hpp"

#include <fstream>

#include "privsim/digest.hpp"
#include "privsim/errors.hpp"

namespace privsim {

using nlohmann::json;

std::string_view to_string(StopRule r) { return r == StopRule::literal ? "literal" : "stale_best"; }

StopRule stop_rule_from_string(std::string_view s) {
    if (s == "literal") return StopRule::literal;
    if (s == "stale_best") return StopRule::stale_best;
    throw ConfigError("unknown stop rule '" + std::string(s) + "'");
}

void OptimizerParams::validate() const {
    if (B < 1) throw ConfigError("B must be >= 1");
    if (I < 1) throw ConfigError("I must be >= 1");
    if (tau < 0.0) throw ConfigError("tau must be >= 0");
    if (!(early_stop_acc > 0.0 && early_stop_acc <= 1.0)) throw ConfigError("early_stop_acc must be in (0, 1]");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (!(max_unscorable_fraction >= 0.0 && max_unscorable_fraction <= 1.0)) {
        throw ConfigError("max_unscorable_fraction must be in [0, 1]");
    }
}

json to_json(const OptimizerParams& p) {
    return {{"B", p.B},
            {"I", p.I},
            {"tau", p.tau},
            {"template", to_string(p.templ)},
            {"early_stop_acc", p.early_stop_acc},
            {"stop_rule", to_string(p.stop_rule)},
            {"patience", p.patience},
            {"max_unscorable_fraction", p.max_unscorable_fraction}};
}

OptimizerParams optimizer_params_from_json(const json& j, OptimizerParams p) {
    p.B = j.value("B", p.B);
    p.I = j.value("I", p.I);
    p.tau = j.value("tau", p.tau);
    if (j.contains("template")) p.templ = generation_template_from_string(j.at("template").get<std::string>());
    p.early_stop_acc = j.value("early_stop_acc", p.early_stop_acc);
    if (j.contains("stop_rule")) p.stop_rule = stop_rule_from_string(j.at("stop_rule").get<std::string>());
    p.patience = j.value("patience", p.patience);
    p.max_unscorable_fraction = j.value("max_unscorable_fraction", p.max_unscorable_fraction);
    p.validate();
    return p;
}

std::int64_t OptimizerTrace::generation_calls() const {
    std::int64_t n = 0;
    for (const auto& it : iterations) n += it.generation_calls;
    return n;
}

std::int64_t OptimizerTrace::prediction_calls() const {
    std::int64_t n = 0;
    for (const auto& it : iterations) n += it.prediction_calls;
    return n;
}

std::int64_t OptimizerTrace::feedback_calls() const {
    std::int64_t n = 0;
    for (const auto& it : iterations) n += it.feedback_calls;
    return n;
}

std::vector<double> OptimizerTrace::best_so_far() const {
    std::vector<double> out;
    for (const auto& it : iterations) out.push_back(it.best_so_far);
    return out;
}

json to_json(const OptimizedPersona& op) {
    const auto& p = op.persona;
    json lineage = json::array();
    for (const auto& [i, b] : p.lineage) lineage.push_back({i, b});
    json iters = json::array();
    for (const auto& it : op.trace.iterations) {
        json accs = json::array();
        for (const auto& a : it.candidate_acc) accs.push_back(a ? json(*a) : json(nullptr));
        iters.push_back({{"iteration", it.iteration},
                         {"candidate_acc", accs},
                         {"best_so_far", it.best_so_far},
                         {"generation_calls", it.generation_calls},
                         {"prediction_calls", it.prediction_calls},
                         {"feedback_calls", it.feedback_calls}});
    }
    return {{"respondent_id", p.respondent_id},
            {"template", to_string(p.templ)},
            {"text", p.text},
            {"gen_accuracy", p.gen_accuracy},
            {"iteration_found", p.iteration_found},
            {"token_count", p.token_count},
            {"lineage", lineage},
            {"trace", iters}};
}

OptimizedPersona optimized_persona_from_json(const json& j) {
    OptimizedPersona op;
    auto& p = op.persona;
    p.respondent_id = j.at("respondent_id").get<std::string>();
    p.templ = generation_template_from_string(j.at("template").get<std::string>());
    p.text = j.at("text").get<std::string>();
    p.gen_accuracy = j.value("gen_accuracy", 0.0);
    p.iteration_found = j.value("iteration_found", 0);
    p.token_count = j.value("token_count", std::size_t{0});
    if (j.contains("lineage")) {
        for (const auto& e : j.at("lineage")) p.lineage.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
    }
    if (j.contains("trace")) {
        for (const auto& e : j.at("trace")) {
            IterationRecord it;
            it.iteration = e.value("iteration", 0);
            for (const auto& a : e.at("candidate_acc")) {
                it.candidate_acc.push_back(a.is_null() ? std::nullopt : std::optional<double>(a.get<double>()));
            }
            it.best_so_far = e.value("best_so_far", 0.0);
            it.generation_calls = e.value("generation_calls", std::int64_t{0});
            it.prediction_calls = e.value("prediction_calls", std::int64_t{0});
            it.feedback_calls = e.value("feedback_calls", std::int64_t{0});
            op.trace.iterations.push_back(std::move(it));
        }
    }
    return op;
}

void write_persona_archive(const std::filesystem::path& path, std::span<const OptimizedPersona> personas) {
    std::string body;
    for (const auto& p : personas) body += to_json(p).dump() + '\n';
    write_file(path, body);
}

std::vector<OptimizedPersona> read_persona_archive(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<OptimizedPersona> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) out.push_back(optimized_persona_from_json(json::parse(line)));
    }
    return out;
}

Evaluation evaluate_persona(Predictor& predictor, const Condition& condition, const std::string& text,
                            const SurveyDataset& ds, std::span<const std::string> question_ids,
                            const ResponseSet& responses) {
    if (question_ids.empty()) throw NoScorableQuestions("no questions to evaluate for " + responses.respondent_id);
    auto ev = summarize(predictor.predict_many(condition, text, ds, question_ids, responses));
    if (ev.scorable == 0) {
        throw NoScorableQuestions("every prediction for " + responses.respondent_id + " was unparseable");
    }
    return ev;
}

FeedbackNote build_feedback(Predictor& predictor, const Persona& persona, std::span<const PredictionRecord> predictions,
                            const SurveyDataset& ds, int sample_index) {
    FeedbackNote note;
    std::vector<Misprediction> errors;
    for (const auto& r : predictions) {
        if (r.error() || !r.truth || r.correct()) continue;
        errors.push_back({r.question_id, ds.question(r.question_id).text, *r.predicted, *r.truth});
        note.wrong_questions.push_back(r.question_id);
    }
    note.predictiveness = !errors.empty();

    const auto& settings = predictor.settings();
    llm::ModelRequest req;
    req.role = llm::Role::feedback;
    req.model_id = settings.feedback_model;
    req.prompt = render_feedback_prompt(persona.text, errors).text;
    req.temperature = settings.feedback_temperature;
    req.max_output = settings.max_output;
    req.request_tag = "feedback:" + std::string(to_string(persona.templ)) + ":" + persona.respondent_id;
    note.text = predictor.gateway().complete(req, sample_index).text;
    return note;
}

namespace {

struct Candidate {
    std::optional<std::string> text;
    std::optional<Evaluation> eval;
};

std::int64_t prediction_requests(const Evaluation& ev) {
    std::int64_t n = 0;
    for (const auto& r : ev.predictions) n += r.retries_used + 1;
    return n;
}

}  // namespace

OptimizedPersona optimize_persona(Predictor& predictor, const SurveyDataset& ds,
                                  std::span<const std::string> gen_ids, const ResponseSet& responses,
                                  const OptimizerParams& params) {
    params.validate();
    if (gen_ids.empty()) throw EmptyScopeError("empty generation set for " + responses.respondent_id);
    const auto raw = serialize_raw_narrative(ds, gen_ids, responses);
    const Condition condition{ConditionKind::persona, params.templ};
    const auto& settings = predictor.settings();
    const auto templ_name = std::string(to_string(params.templ));

    OptimizedPersona out;
    auto& best = out.persona;
    best.templ = params.templ;
    best.respondent_id = responses.respondent_id;
    std::optional<double> best_acc;
    std::vector<PredictionRecord> best_predictions;
    std::optional<FeedbackNote> feedback;
    int stale = 0;

    for (int i = 1; i <= params.I; ++i) {
        IterationRecord rec;
        rec.iteration = i;

        const auto prompt = i == 1 ? render_generation_prompt(params.templ, raw).text
                                   : render_refine_prompt(best.text, feedback->text).text;
        std::vector<std::pair<llm::ModelRequest, int>> batch;
        for (int b = 0; b < params.B; ++b) {
            llm::ModelRequest req;
            req.role = llm::Role::generation;
            req.model_id = settings.generation_model;
            req.prompt = prompt;
            req.temperature = params.tau;
            req.max_output = settings.max_output;
            req.request_tag = "generate:" + templ_name + ":" + responses.respondent_id + ":" + std::to_string(i) +
                              ":" + std::to_string(b);
            batch.emplace_back(std::move(req), (i - 1) * params.B + b);
        }
        auto replies = predictor.gateway().complete_many(batch);
        rec.generation_calls = params.B;

        std::vector<Candidate> candidates(replies.size());
        for (std::size_t b = 0; b < replies.size(); ++b) {
            if (!replies[b].ok()) {
                if (replies[b].error_kind == "EmptyCompletion") continue;
                std::rethrow_exception(replies[b].error);
            }
            candidates[b].text = replies[b].response->text;
            auto ev = summarize(predictor.predict_many(condition, *candidates[b].text, ds, gen_ids, responses));
            rec.prediction_calls += prediction_requests(ev);
            if (ev.scorable > 0 && ev.unscorable_fraction() <= params.max_unscorable_fraction) {
                candidates[b].eval = std::move(ev);
            }
        }

        const auto parent_lineage = best.lineage;
        bool improved = false;
        for (std::size_t b = 0; b < candidates.size(); ++b) {
            const auto& c = candidates[b];
            rec.candidate_acc.push_back(c.eval ? c.eval->accuracy : std::nullopt);
            if (!c.eval) continue;
            const double acc = *c.eval->accuracy;
            if (best_acc && !(acc > *best_acc)) continue;
            auto lineage = parent_lineage;
            lineage.emplace_back(i, static_cast<int>(b));
            best.text = *c.text;
            best.gen_accuracy = acc;
            best.iteration_found = i;
            best.lineage = std::move(lineage);
            best_acc = acc;
            best_predictions = c.eval->predictions;
            improved = true;
        }
        if (!best_acc) {
            throw AllCandidatesFailed("no scorable persona candidate for " + responses.respondent_id);
        }
        stale = improved ? 0 : stale + 1;
        rec.best_so_far = *best_acc;

        const bool done = *best_acc >= params.early_stop_acc || i == params.I ||
                          (params.stop_rule == StopRule::stale_best && stale >= params.patience);
        if (!done) {
            feedback = build_feedback(predictor, best, best_predictions, ds, i);
            rec.feedback_calls = 1;
        }
        out.trace.iterations.push_back(std::move(rec));
        if (done) break;
    }
    best.token_count = count_tokens(best.text);
    return out;
}

}  // namespace privsim
