#include "privsim/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include <fmt/chrono.h>
#include <fmt/format.h>

#include "privsim/digest.hpp"
#include "privsim/errors.hpp"
#include "privsim/llm/mock_backend.hpp"
#include "privsim/random.hpp"
#include "privsim/synthetic.hpp"

namespace privsim {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::string_view kBaseline = "baseline";
constexpr std::string_view kRaw = "raw";
constexpr std::string_view kPersona = "persona";
constexpr std::string_view kBestTemplate = "best_template";

bool contains(const std::vector<std::string>& v, std::string_view s) {
    return std::find(v.begin(), v.end(), s) != v.end();
}

fs::path resolve(const fs::path& p, const fs::path& base) {
    if (p.empty() || p.is_absolute() || base.empty()) return p;
    return (base / p).lexically_normal();
}

std::string now_utc() {
    return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::chrono::system_clock::to_time_t(
                                                    std::chrono::system_clock::now())));
}

template <class T, class F>
std::vector<T> read_jsonl(const fs::path& path, F&& parse) {
    std::vector<T> out;
    std::ifstream in(path);
    if (!in) return out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) out.push_back(parse(json::parse(line)));
    }
    return out;
}

void write_jsonl(const fs::path& path, const std::vector<json>& rows) {
    std::string body;
    for (const auto& r : rows) body += r.dump() + '\n';
    write_file(path, body);
}

}  // namespace

std::string_view to_string(Design d) {
    switch (d) {
        case Design::in_study: return "in_study";
        case Design::cross_study: return "cross_study";
        case Design::theory_comparison: return "theory_comparison";
        case Design::attitude_behavior: return "attitude_behavior";
        case Design::iteration_sweep: return "iteration_sweep";
    }
    return "in_study";
}

Design design_from_string(std::string_view s) {
    for (auto d : {Design::in_study, Design::cross_study, Design::theory_comparison, Design::attitude_behavior,
                   Design::iteration_sweep}) {
        if (to_string(d) == s) return d;
    }
    throw ConfigError("unknown design '" + std::string(s) + "'");
}

std::vector<GenerationTemplate> ExperimentConfig::effective_templates() const {
    if (!templates.empty()) return templates;
    if (design == Design::theory_comparison || design == Design::attitude_behavior) {
        return {std::begin(kAllGenerationTemplates), std::end(kAllGenerationTemplates)};
    }
    return {GenerationTemplate::basic};
}

std::vector<std::string> ExperimentConfig::effective_conditions() const {
    std::vector<std::string> out = conditions;
    if (out.empty()) {
        switch (design) {
            case Design::in_study: out = {"baseline", "raw", "persona"}; break;
            case Design::theory_comparison: out = {"persona", "best_template"}; break;
            default: out = {"persona"};
        }
    }
    if (design == Design::cross_study && !contains(out, kPersona)) out.emplace_back(kPersona);
    return out;
}

OptimizerParams ExperimentConfig::params_for(GenerationTemplate t) const {
    auto p = optimizer;
    p.templ = t;
    if (auto it = optimizer_overrides.find(t); it != optimizer_overrides.end()) {
        p = optimizer_params_from_json(it->second, p);
        p.templ = t;
    }
    return p;
}

void ExperimentConfig::validate() const {
    if (dataset.empty()) throw ConfigError("config needs a dataset path");
    if (design == Design::cross_study && !target_dataset) throw ConfigError("cross_study needs a target_dataset");
    if (!(selection_threshold >= 0.0 && selection_threshold <= 1.0)) {
        throw ConfigError("selection_threshold must be in [0, 1]");
    }
    if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ConfigError("split ratio must be in (0, 1)");
    if (!(calibration_fraction > 0.0 && calibration_fraction < 1.0)) {
        throw ConfigError("calibration fraction must be in (0, 1)");
    }
    if (calibration_min < 1) throw ConfigError("calibration min_questions must be >= 1");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    if (bootstrap.resamples < 1) throw ConfigError("bootstrap resamples must be >= 1");
    if (!(bootstrap.level > 0.0 && bootstrap.level < 1.0)) throw ConfigError("bootstrap level must be in (0, 1)");

    const auto templs = effective_templates();
    std::set<GenerationTemplate> seen(templs.begin(), templs.end());
    if (seen.size() != templs.size()) throw ConfigError("templates must be unique");
    for (auto t : templs) {
        const auto p = params_for(t);
        p.validate();
        if ((design == Design::theory_comparison || design == Design::attitude_behavior) && p.I != 1) {
            throw ConfigError(std::string(to_string(design)) + " runs with I = 1, got I = " + std::to_string(p.I) +
                              " for " + std::string(to_string(t)));
        }
    }
    for (const auto& c : effective_conditions()) {
        if (c != kBaseline && c != kRaw && c != kPersona && c != kBestTemplate) {
            throw ConfigError("unknown condition '" + c + "'");
        }
    }
    if (design == Design::iteration_sweep) {
        if (iteration_values.empty()) throw ConfigError("iteration_sweep needs iteration_values");
        for (int v : iteration_values) {
            if (v < 1) throw ConfigError("iteration values must be >= 1");
        }
    }
    if (backend.kind != "synthetic" && backend.kind != "mock" && backend.kind != "remote" &&
        backend.kind != "replay") {
        throw ConfigError("unknown backend kind '" + backend.kind + "'");
    }
}

ExperimentConfig config_from_json(const json& j, const fs::path& base_dir) {
    static const std::set<std::string> kKnown = {
        "run_id",     "design",      "dataset",   "target_dataset",      "output_dir",      "seed",
        "split",      "optimizer",   "optimizer_overrides",              "templates",       "conditions",
        "selection_threshold",       "filter_in_study",                  "calibration",     "iteration_values",
        "models",     "backend",     "gateway",   "bootstrap",           "workers",         "persona_archive"};
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!kKnown.count(key)) throw ConfigError("unknown config field '" + key + "'");
    }

    ExperimentConfig c;
    try {
        c.run_id = j.value("run_id", std::string{});
        if (j.contains("design")) c.design = design_from_string(j.at("design").get<std::string>());
        c.dataset = resolve(j.at("dataset").get<std::string>(), base_dir);
        if (j.contains("target_dataset") && !j.at("target_dataset").is_null()) {
            c.target_dataset = resolve(j.at("target_dataset").get<std::string>(), base_dir);
        }
        c.output_dir = resolve(j.value("output_dir", std::string("runs")), base_dir);
        c.seed = j.value("seed", std::uint64_t{0});
        if (j.contains("split")) {
            const auto& s = j.at("split");
            c.split_ratio = s.value("ratio", c.split_ratio);
            if (s.contains("scope")) c.scope = scope_from_string(s.at("scope").get<std::string>());
            if (s.contains("target_scope")) c.target_scope = scope_from_string(s.at("target_scope").get<std::string>());
        }
        if (j.contains("optimizer")) c.optimizer = optimizer_params_from_json(j.at("optimizer"));
        if (j.contains("optimizer_overrides")) {
            for (const auto& [name, o] : j.at("optimizer_overrides").items()) {
                c.optimizer_overrides[generation_template_from_string(name)] = o;
            }
        }
        if (j.contains("templates")) {
            for (const auto& t : j.at("templates")) c.templates.push_back(generation_template_from_string(t.get<std::string>()));
        }
        if (j.contains("conditions")) c.conditions = j.at("conditions").get<std::vector<std::string>>();
        c.selection_threshold = j.value("selection_threshold", c.selection_threshold);
        c.filter_in_study = j.value("filter_in_study", c.filter_in_study);
        if (j.contains("calibration")) {
            const auto& s = j.at("calibration");
            if (s.contains("mode")) c.calibration_mode = calibration_mode_from_string(s.at("mode").get<std::string>());
            c.calibration_fraction = s.value("fraction", c.calibration_fraction);
            c.calibration_min = s.value("min_questions", c.calibration_min);
        }
        if (j.contains("iteration_values")) c.iteration_values = j.at("iteration_values").get<std::vector<int>>();
        if (j.contains("models")) {
            const auto& m = j.at("models");
            c.models.generation_model = m.value("generation", c.models.generation_model);
            c.models.prediction_model = m.value("prediction", c.models.prediction_model);
            c.models.feedback_model = m.value("feedback", c.models.generation_model);
            c.models.prediction_temperature = m.value("prediction_temperature", c.models.prediction_temperature);
            c.models.feedback_temperature = m.value("feedback_temperature", c.models.feedback_temperature);
            c.models.max_parse_retries = m.value("max_parse_retries", c.models.max_parse_retries);
            if (m.contains("max_output") && !m.at("max_output").is_null()) c.models.max_output = m.at("max_output").get<int>();
        }
        c.models.generation_temperature = c.optimizer.tau;
        if (j.contains("backend")) {
            const auto& b = j.at("backend");
            c.backend.kind = b.value("kind", c.backend.kind);
            if (b.contains("script")) c.backend.script = resolve(b.at("script").get<std::string>(), base_dir);
            c.backend.synthetic_types = b.value("types", c.backend.synthetic_types);
            c.backend.remote.base_url = b.value("base_url", std::string{});
            c.backend.remote.auth_env = b.value("auth_env", std::string{});
            c.backend.remote.timeout_seconds = b.value("timeout_seconds", c.backend.remote.timeout_seconds);
            if (b.contains("log")) c.backend.replay_log = resolve(b.at("log").get<std::string>(), base_dir);
        }
        if (j.contains("gateway")) {
            const auto& g = j.at("gateway");
            c.gateway.retry_limit = g.value("retry_limit", c.gateway.retry_limit);
            c.gateway.backoff_initial = std::chrono::milliseconds(g.value("backoff_ms", c.gateway.backoff_initial.count()));
            c.gateway.backoff_multiplier = g.value("backoff_multiplier", c.gateway.backoff_multiplier);
            c.gateway.concurrency_cap = g.value("concurrency", c.gateway.concurrency_cap);
            c.gateway.rate_limit_per_sec = g.value("rate_limit_per_sec", c.gateway.rate_limit_per_sec);
            c.gateway.rate_limit_burst = g.value("rate_limit_burst", c.gateway.rate_limit_burst);
            c.gateway.max_calls = g.value("max_calls", c.gateway.max_calls);
            c.gateway.max_total_tokens = g.value("max_total_tokens", c.gateway.max_total_tokens);
            c.gateway.cache_enabled = g.value("cache", c.gateway.cache_enabled);
        }
        if (j.contains("bootstrap")) {
            const auto& b = j.at("bootstrap");
            c.bootstrap.resamples = b.value("resamples", c.bootstrap.resamples);
            c.bootstrap.level = b.value("level", c.bootstrap.level);
        }
        c.workers = j.value("workers", c.workers);
        if (j.contains("persona_archive") && !j.at("persona_archive").is_null()) {
            c.persona_archive = resolve(j.at("persona_archive").get<std::string>(), base_dir);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
    c.validate();
    return c;
}

json to_json(const ExperimentConfig& c) {
    json templates = json::array();
    for (auto t : c.templates) templates.push_back(to_string(t));
    json overrides = json::object();
    for (const auto& [t, o] : c.optimizer_overrides) overrides[std::string(to_string(t))] = o;
    json j{{"run_id", c.run_id},
           {"design", to_string(c.design)},
           {"dataset", c.dataset.string()},
           {"target_dataset", c.target_dataset ? json(c.target_dataset->string()) : json(nullptr)},
           {"output_dir", c.output_dir.string()},
           {"seed", c.seed},
           {"split", {{"ratio", c.split_ratio}, {"scope", to_string(c.scope)}, {"target_scope", to_string(c.target_scope)}}},
           {"optimizer", to_json(c.optimizer)},
           {"optimizer_overrides", overrides},
           {"templates", templates},
           {"conditions", c.conditions},
           {"selection_threshold", c.selection_threshold},
           {"filter_in_study", c.filter_in_study},
           {"calibration",
            {{"mode", to_string(c.calibration_mode)},
             {"fraction", c.calibration_fraction},
             {"min_questions", c.calibration_min}}},
           {"iteration_values", c.iteration_values},
           {"models",
            {{"generation", c.models.generation_model},
             {"prediction", c.models.prediction_model},
             {"feedback", c.models.feedback_model},
             {"prediction_temperature", c.models.prediction_temperature},
             {"feedback_temperature", c.models.feedback_temperature},
             {"max_parse_retries", c.models.max_parse_retries},
             {"max_output", c.models.max_output ? json(*c.models.max_output) : json(nullptr)}}},
           {"gateway",
            {{"retry_limit", c.gateway.retry_limit},
             {"backoff_ms", c.gateway.backoff_initial.count()},
             {"backoff_multiplier", c.gateway.backoff_multiplier},
             {"concurrency", c.gateway.concurrency_cap},
             {"rate_limit_per_sec", c.gateway.rate_limit_per_sec},
             {"rate_limit_burst", c.gateway.rate_limit_burst},
             {"max_calls", c.gateway.max_calls},
             {"max_total_tokens", c.gateway.max_total_tokens},
             {"cache", c.gateway.cache_enabled}}},
           {"bootstrap", {{"resamples", c.bootstrap.resamples}, {"level", c.bootstrap.level}}},
           {"workers", c.workers},
           {"persona_archive", c.persona_archive ? json(c.persona_archive->string()) : json(nullptr)}};
    json b{{"kind", c.backend.kind}};
    if (c.backend.kind == "mock") b["script"] = c.backend.script.string();
    if (c.backend.kind == "synthetic") b["types"] = c.backend.synthetic_types;
    if (c.backend.kind == "remote") {
        b["base_url"] = c.backend.remote.base_url;
        b["auth_env"] = c.backend.remote.auth_env;
        b["timeout_seconds"] = c.backend.remote.timeout_seconds;
    }
    if (c.backend.kind == "replay") b["log"] = c.backend.replay_log.string();
    j["backend"] = b;
    return j;
}

ExperimentConfig load_config(const fs::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError("cannot parse " + path.string() + ": " + e.what());
    }
    auto cfg = config_from_json(j, fs::absolute(path).parent_path());
    if (cfg.run_id.empty()) cfg.run_id = path.stem().string();
    return cfg;
}

std::shared_ptr<llm::Backend> make_backend(const BackendConfig& cfg, const SurveyDataset& source) {
    if (cfg.kind == "synthetic") return std::make_shared<SyntheticRuleBackend>(source, cfg.synthetic_types);
    if (cfg.kind == "mock") return llm::ScriptedMock::from_file(cfg.script);
    if (cfg.kind == "remote") return std::make_shared<llm::RemoteBackend>(cfg.remote);
    if (cfg.kind == "replay") return std::make_shared<llm::ReplayBackend>(cfg.replay_log);
    throw ConfigError("unknown backend kind '" + cfg.kind + "'");
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
    if (n == 0) return;
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const auto threads = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, workers)), n);
    if (threads == 1) {
        work();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work);
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

SplitResult attitude_behavior_splits(const SurveyDataset& ds, std::uint64_t seed) {
    SplitResult out;
    for (const auto& r : ds.respondents()) {
        QuestionSplit s;
        s.respondent_id = r.respondent_id;
        s.seed = seed;
        for (const auto& id : ds.answered(r)) {
            const auto d = ds.question(id).domain;
            if (d == Domain::attitude) s.gen_ids.push_back(id);
            else if (d == Domain::behavioral) s.eval_ids.push_back(id);
        }
        if (s.gen_ids.empty()) {
            out.skipped.push_back({r.respondent_id, "no attitude answers"});
        } else if (s.eval_ids.empty()) {
            out.skipped.push_back({r.respondent_id, "no behavioral answers"});
        } else {
            out.splits.push_back(std::move(s));
        }
    }
    return out;
}

std::vector<std::string> select_personas(const std::map<std::string, double>& source_accuracy, double threshold) {
    std::vector<std::string> out;
    for (const auto& [id, acc] : source_accuracy) {
        if (acc >= threshold) out.push_back(id);
    }
    return out;
}

std::vector<PredictionRecord> transfer_predictions(Predictor& predictor, std::span<const OptimizedPersona> personas,
                                                   const SurveyDataset& target,
                                                   std::span<const std::string> question_ids, int workers) {
    std::vector<std::vector<PredictionRecord>> per(personas.size());
    parallel_for(personas.size(), workers, [&](std::size_t i) {
        const auto& p = personas[i].persona;
        auto recs = predictor.predict_many({ConditionKind::persona, p.templ}, p.text, target, question_ids,
                                           p.respondent_id);
        for (auto& r : recs) r.condition = "transfer:" + std::string(to_string(p.templ));
        per[i] = std::move(recs);
    });
    std::vector<PredictionRecord> out;
    for (auto& v : per) out.insert(out.end(), std::make_move_iterator(v.begin()), std::make_move_iterator(v.end()));
    return out;
}

std::vector<ArmPlan> plan_arms(const ExperimentConfig& cfg, const SurveyDataset& ds) {
    const auto templates = cfg.effective_templates();
    const auto split_seed = derive_seed(cfg.seed, "split");
    switch (cfg.design) {
        case Design::in_study:
        case Design::theory_comparison:
            return {{"main", split_questions(ds, cfg.split_ratio, split_seed, cfg.scope), templates, std::nullopt}};
        case Design::cross_study:
            return {{"source", split_questions(ds, cfg.split_ratio, split_seed, SplitScope::behavioral),
                     {templates.front()}, std::nullopt}};
        case Design::attitude_behavior:
            return {{"attitude_to_behavioral", attitude_behavior_splits(ds, split_seed), templates, std::nullopt},
                    {"behavioral_to_behavioral", split_questions(ds, cfg.split_ratio, split_seed, SplitScope::behavioral),
                     templates, std::nullopt}};
        case Design::iteration_sweep: {
            std::vector<ArmPlan> arms;
            const auto split = split_questions(ds, cfg.split_ratio, split_seed, cfg.scope);
            for (int k : cfg.iteration_values) arms.push_back({"I" + std::to_string(k), split, {templates.front()}, k});
            return arms;
        }
    }
    return {};
}

FidelityReport RunResults::merged() const {
    FidelityReport out;
    out.metadata["design"] = to_string(design);
    for (const auto& arm : arms) {
        for (auto c : arm.report.conditions) {
            if (arms.size() > 1) c.condition = arm.name + "/" + c.condition;
            out.conditions.push_back(std::move(c));
        }
    }
    if (transfer) out.conditions.push_back(*transfer);
    return out;
}

json to_json(const RunResults& r) {
    json arms = json::array();
    for (const auto& a : r.arms) {
        json shares = json::array();
        for (const auto& s : a.best_template) {
            shares.push_back({{"template", s.templ}, {"wins", s.wins}, {"fraction", s.fraction}});
        }
        json tokens = json::array();
        for (const auto& t : a.tokens) {
            tokens.push_back({{"dataset", t.dataset},
                              {"tokenizer", t.tokenizer},
                              {"raw", t.raw},
                              {"narrative", t.narrative},
                              {"reduction_pct", percent_reduction(t.raw, t.narrative)}});
        }
        arms.push_back({{"name", a.name},
                        {"skipped_respondents", a.skipped_respondents},
                        {"failed_optimizations", a.failed_optimizations},
                        {"best_template", shares},
                        {"tokens", tokens}});
    }
    json selection = json::array();
    for (const auto& s : r.selection) {
        selection.push_back({{"respondent_id", s.respondent_id}, {"source_accuracy", s.source_accuracy}, {"selected", s.selected}});
    }
    json sweep = json::array();
    for (const auto& p : r.sweep) sweep.push_back({{"I", p.iterations}, {"report", to_json(p.report)}});
    return {{"design", to_string(r.design)},
            {"arms", arms},
            {"report", to_json(r.merged())},
            {"selection", selection},
            {"sweep", sweep}};
}

ReportFormat report_format_from_string(std::string_view s) {
    if (s == "table") return ReportFormat::table;
    if (s == "plot") return ReportFormat::plot;
    if (s == "all") return ReportFormat::all;
    throw ConfigError("unknown report format '" + std::string(s) + "'");
}

ExperimentRunner::ExperimentRunner(ExperimentConfig cfg, std::shared_ptr<llm::Backend> backend)
    : cfg_(std::move(cfg)), backend_(std::move(backend)) {
    cfg_.validate();
    if (cfg_.run_id.empty()) {
        cfg_.run_id = "run-" + sha256_hex(to_json(cfg_).dump()).substr(0, 12);
    }
    run_dir_ = cfg_.output_dir / cfg_.run_id;
    source_ = std::make_unique<SurveyDataset>(load_dataset(cfg_.dataset));
    if (cfg_.target_dataset) target_ = std::make_unique<SurveyDataset>(load_dataset(*cfg_.target_dataset));
    if (!backend_) backend_ = make_backend(cfg_.backend, *source_);
    auto gw = cfg_.gateway;
    if (gw.cache_enabled && !gw.cache_dir) gw.cache_dir = run_dir_ / "cache";
    gateway_ = std::make_unique<llm::Gateway>(backend_, gw);
    cfg_.models.generation_temperature = cfg_.optimizer.tau;
}

fs::path ExperimentRunner::arm_dir(const std::string& arm) const { return run_dir_ / "arms" / arm; }

bool ExperimentRunner::optimized() const {
    for (const auto& arm : plan_arms(cfg_, *source_)) {
        if (!fs::exists(arm_dir(arm.name) / "personas.jsonl")) return false;
    }
    return true;
}

llm::GatewayStats ExperimentRunner::gateway_stats() const { return gateway_->stats(); }

void ExperimentRunner::optimize() {
    fs::create_directories(run_dir_);
    write_file(run_dir_ / "config.json", to_json(cfg_).dump(2) + "\n");
    Predictor predictor(*gateway_, cfg_.models);

    for (const auto& arm : plan_arms(cfg_, *source_)) {
        const auto dir = arm_dir(arm.name);
        std::vector<json> rows;
        for (const auto& s : arm.split.splits) rows.push_back(to_json(s));
        write_jsonl(dir / "splits.jsonl", rows);
        rows.clear();
        for (const auto& s : arm.split.skipped) rows.push_back({{"respondent_id", s.respondent_id}, {"reason", s.reason}});
        write_jsonl(dir / "skipped.jsonl", rows);

        if (cfg_.design == Design::cross_study && cfg_.persona_archive) {
            write_persona_archive(dir / "personas.jsonl", read_persona_archive(*cfg_.persona_archive));
            write_jsonl(dir / "optimize_failures.jsonl", {});
            continue;
        }

        struct Job {
            const QuestionSplit* split;
            GenerationTemplate templ;
        };
        std::vector<Job> jobs;
        for (const auto& s : arm.split.splits) {
            for (auto t : arm.templates) jobs.push_back({&s, t});
        }
        std::vector<std::optional<OptimizedPersona>> done(jobs.size());
        std::vector<std::optional<std::string>> failed(jobs.size());
        try {
            parallel_for(jobs.size(), cfg_.workers, [&](std::size_t i) {
                const auto& job = jobs[i];
                auto params = cfg_.params_for(job.templ);
                if (arm.iterations) params.I = *arm.iterations;
                try {
                    done[i] = optimize_persona(predictor, *source_, job.split->gen_ids,
                                               source_->respondent(job.split->respondent_id), params);
                } catch (const AllCandidatesFailed& e) {
                    failed[i] = e.what();
                } catch (const NoScorableQuestions& e) {
                    failed[i] = e.what();
                }
            });
        } catch (...) {
            std::vector<OptimizedPersona> partial;
            for (auto& d : done) {
                if (d) partial.push_back(*d);
            }
            write_persona_archive(dir / "personas.partial.jsonl", partial);
            persist_calls();
            throw;
        }
        std::vector<OptimizedPersona> personas;
        rows.clear();
        for (std::size_t i = 0; i < jobs.size(); ++i) {
            if (done[i]) personas.push_back(std::move(*done[i]));
            if (failed[i]) {
                rows.push_back({{"respondent_id", jobs[i].split->respondent_id},
                                {"template", to_string(jobs[i].templ)},
                                {"reason", *failed[i]}});
            }
        }
        write_persona_archive(dir / "personas.jsonl", personas);
        write_jsonl(dir / "optimize_failures.jsonl", rows);
        fs::remove(dir / "personas.partial.jsonl");
    }
    persist_calls();
    write_manifest("optimize");
}

namespace {

struct RespondentEval {
    std::vector<PredictionRecord> records;
    std::optional<CalibrationChoice> choice;
};

std::vector<std::string> minus(const std::vector<std::string>& all, const std::vector<std::string>& drop) {
    std::vector<std::string> out;
    for (const auto& id : all) {
        if (!contains(drop, id)) out.push_back(id);
    }
    return out;
}

json to_json(const CalibrationChoice& c) {
    json accs = json::object();
    for (const auto& [t, a] : c.per_template_acc) accs[std::string(to_string(t))] = a;
    return {{"respondent_id", c.respondent_id},
            {"chosen_template", to_string(c.chosen_template)},
            {"mode", to_string(c.mode)},
            {"per_template_acc", accs}};
}

}  // namespace

RunResults ExperimentRunner::evaluate() {
    if (!optimized()) optimize();
    Predictor predictor(*gateway_, cfg_.models);
    const auto conditions = cfg_.effective_conditions();
    const bool best = contains(conditions, kBestTemplate);
    const bool held_out = best && cfg_.calibration_mode == CalibrationMode::held_out_calibration;

    try {
        for (const auto& arm : plan_arms(cfg_, *source_)) {
            const auto dir = arm_dir(arm.name);
            const auto archive = read_persona_archive(dir / "personas.jsonl");
            std::map<std::pair<std::string, GenerationTemplate>, const Persona*> persona_of;
            for (const auto& p : archive) persona_of[{p.persona.respondent_id, p.persona.templ}] = &p.persona;

            const auto& splits = arm.split.splits;
            std::vector<RespondentEval> out(splits.size());
            parallel_for(splits.size(), cfg_.workers, [&](std::size_t i) {
                const auto& split = splits[i];
                const auto& rs = source_->respondent(split.respondent_id);
                std::vector<std::string> calib;
                if (held_out) {
                    calib = choose_calibration_questions(*source_, split.eval_ids, cfg_.calibration_fraction,
                                                         cfg_.calibration_min,
                                                         derive_seed(cfg_.seed, "calibration:" + arm.name, i));
                }
                const auto report_ids = minus(split.eval_ids, calib);
                if (report_ids.empty()) return;
                auto& recs = out[i].records;
                auto add = [&recs](std::vector<PredictionRecord> more) {
                    recs.insert(recs.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
                };
                for (const auto& c : conditions) {
                    if (c == kBaseline) {
                        add(predictor.predict_many({ConditionKind::baseline}, std::nullopt, *source_, report_ids, rs));
                    } else if (c == kRaw) {
                        add(predictor.predict_many({ConditionKind::raw}, serialize_raw_narrative(*source_, split.gen_ids, rs),
                                                   *source_, report_ids, rs));
                    } else if (c == kPersona) {
                        for (auto t : arm.templates) {
                            auto it = persona_of.find({split.respondent_id, t});
                            if (it == persona_of.end()) continue;
                            add(predictor.predict_many({ConditionKind::persona, t}, it->second->text, *source_,
                                                       report_ids, rs));
                        }
                    } else if (c == kBestTemplate) {
                        std::map<GenerationTemplate, std::string> texts;
                        for (auto t : arm.templates) {
                            auto it = persona_of.find({split.respondent_id, t});
                            if (it != persona_of.end()) texts[t] = it->second->text;
                        }
                        if (texts.empty() || (held_out && calib.empty())) continue;
                        CalibrationChoice choice;
                        try {
                            choice = calibrate_select(texts, *source_, held_out ? calib : report_ids, rs,
                                                      cfg_.calibration_mode, predictor);
                        } catch (const NoScorableQuestions&) {
                            choice.respondent_id = split.respondent_id;
                            choice.mode = cfg_.calibration_mode;
                            choice.chosen_template = texts.begin()->first;
                        }
                        auto chosen = predictor.predict_many({ConditionKind::persona, choice.chosen_template},
                                                             texts.at(choice.chosen_template), *source_, report_ids, rs);
                        for (auto& r : chosen) r.condition = std::string(kBestTemplate);
                        add(std::move(chosen));
                        out[i].choice = std::move(choice);
                    }
                }
            });
            std::vector<PredictionRecord> all;
            std::vector<json> choices;
            for (auto& e : out) {
                all.insert(all.end(), std::make_move_iterator(e.records.begin()), std::make_move_iterator(e.records.end()));
                if (e.choice) choices.push_back(to_json(*e.choice));
            }
            write_predictions(dir / "predictions.jsonl", all);
            write_jsonl(dir / "calibration.jsonl", choices);
        }

        if (cfg_.design == Design::cross_study) {
            const auto arm = plan_arms(cfg_, *source_).front();
            const auto dir = arm_dir(arm.name);
            const auto label = "persona:" + std::string(to_string(arm.templates.front()));
            std::map<std::string, std::vector<PredictionRecord>> by_resp;
            for (auto& r : read_predictions(dir / "predictions.jsonl")) {
                if (r.condition == label) by_resp[r.respondent_id].push_back(std::move(r));
            }
            std::map<std::string, double> source_acc;
            for (const auto& [id, recs] : by_resp) {
                try {
                    source_acc[id] = individual_accuracy(recs);
                } catch (const NoScorable&) {
                }
            }
            const auto survivors = select_personas(source_acc, cfg_.selection_threshold);
            std::vector<json> rows;
            for (const auto& [id, acc] : source_acc) {
                rows.push_back({{"respondent_id", id}, {"source_accuracy", acc}, {"selected", contains(survivors, id)}});
            }
            write_jsonl(run_dir_ / "transfer" / "selection.jsonl", rows);
            if (survivors.empty()) {
                throw NoPersonasSurvive(fmt::format("no persona reached source accuracy {:.2f}", cfg_.selection_threshold));
            }
            std::vector<OptimizedPersona> chosen;
            for (const auto& p : read_persona_archive(dir / "personas.jsonl")) {
                if (p.persona.templ == arm.templates.front() && contains(survivors, p.persona.respondent_id)) {
                    chosen.push_back(p);
                }
            }
            std::vector<std::string> qids;
            for (const auto& q : target_->questions()) {
                if (in_scope(q.domain, cfg_.target_scope)) qids.push_back(q.id);
            }
            if (qids.empty()) throw EmptyScopeError("target dataset has no questions in scope");
            write_predictions(run_dir_ / "transfer" / "predictions.jsonl",
                              transfer_predictions(predictor, chosen, *target_, qids, cfg_.workers));
        }
    } catch (...) {
        persist_calls();
        throw;
    }
    persist_calls();
    auto res = results();
    emit(res, ReportFormat::all);
    write_manifest("evaluate");
    return res;
}

RunResults ExperimentRunner::run() {
    optimize();
    return evaluate();
}

RunResults ExperimentRunner::results() const {
    RunResults res;
    res.design = cfg_.design;
    const auto conditions = cfg_.effective_conditions();
    const auto& tok = default_tokenizer();

    for (const auto& arm : plan_arms(cfg_, *source_)) {
        const auto dir = arm_dir(arm.name);
        ArmResults ar;
        ar.name = arm.name;
        ar.skipped_respondents = arm.split.skipped.size();
        ar.failed_optimizations =
            read_jsonl<json>(dir / "optimize_failures.jsonl", [](const json& j) { return j; }).size();

        auto bs = cfg_.bootstrap;
        bs.seed = derive_seed(cfg_.seed, "bootstrap:" + arm.name);

        const auto records = fs::exists(dir / "predictions.jsonl") ? read_predictions(dir / "predictions.jsonl")
                                                                    : std::vector<PredictionRecord>{};
        std::vector<std::string> labels;
        for (const auto& c : conditions) {
            if (c == kPersona) {
                for (auto t : arm.templates) labels.push_back("persona:" + std::string(to_string(t)));
            } else {
                labels.push_back(c);
            }
        }
        for (const auto& label : labels) {
            std::vector<PredictionRecord> recs;
            for (const auto& r : records) {
                if (r.condition == label) recs.push_back(r);
            }
            if (recs.empty()) continue;
            auto rep = population_report_random_split(label, recs, arm.split.splits, *source_, bs);
            if (cfg_.filter_in_study && cfg_.design == Design::in_study && label.starts_with("persona:")) {
                std::vector<PredictionRecord> kept;
                for (const auto& r : recs) {
                    auto it = rep.per_respondent_acc.find(r.respondent_id);
                    if (it != rep.per_respondent_acc.end() && it->second >= cfg_.selection_threshold) kept.push_back(r);
                }
                ar.report.conditions.push_back(std::move(rep));
                if (!kept.empty()) {
                    ar.report.conditions.push_back(
                        population_report_random_split(label + "+filtered", kept, arm.split.splits, *source_, bs));
                }
                continue;
            }
            ar.report.conditions.push_back(std::move(rep));
        }

        const auto choices = read_jsonl<json>(dir / "calibration.jsonl", [](const json& j) { return j; });
        if (!choices.empty()) {
            for (auto t : arm.templates) {
                TemplateShare s{std::string(to_string(t)), 0, 0.0};
                for (const auto& c : choices) {
                    if (c.at("chosen_template").get<std::string>() == s.templ) ++s.wins;
                }
                s.fraction = static_cast<double>(s.wins) / static_cast<double>(choices.size());
                ar.best_template.push_back(s);
            }
        }

        const auto archive = fs::exists(dir / "personas.jsonl") ? read_persona_archive(dir / "personas.jsonl")
                                                                 : std::vector<OptimizedPersona>{};
        std::map<std::string, const QuestionSplit*> split_of;
        for (const auto& s : arm.split.splits) split_of[s.respondent_id] = &s;
        for (auto t : arm.templates) {
            double raw = 0.0, narr = 0.0;
            std::size_t n = 0;
            for (const auto& p : archive) {
                if (p.persona.templ != t) continue;
                auto it = split_of.find(p.persona.respondent_id);
                if (it == split_of.end()) continue;
                raw += static_cast<double>(count_tokens(
                    serialize_raw_narrative(*source_, it->second->gen_ids, source_->respondent(it->first)), tok));
                narr += static_cast<double>(count_tokens(p.persona.text, tok));
                ++n;
            }
            if (n == 0) continue;
            std::string label = source_->name();
            if (arm.templates.size() > 1 || cfg_.design != Design::in_study) {
                label += ":" + arm.name + ":" + std::string(to_string(t));
            }
            ar.tokens.push_back({label, tok.name(), raw / static_cast<double>(n), narr / static_cast<double>(n)});
        }

        if (cfg_.design == Design::iteration_sweep && arm.iterations) {
            for (const auto& c : ar.report.conditions) {
                if (c.condition.starts_with("persona:")) {
                    res.sweep.push_back({*arm.iterations, c});
                    break;
                }
            }
        }
        res.arms.push_back(std::move(ar));
    }

    if (cfg_.design == Design::cross_study) {
        for (const auto& j : read_jsonl<json>(run_dir_ / "transfer" / "selection.jsonl", [](const json& j) { return j; })) {
            res.selection.push_back({j.at("respondent_id").get<std::string>(), j.at("source_accuracy").get<double>(),
                                     j.at("selected").get<bool>()});
        }
        const auto path = run_dir_ / "transfer" / "predictions.jsonl";
        if (fs::exists(path)) {
            const auto recs = read_predictions(path);
            if (!recs.empty()) {
                auto bs = cfg_.bootstrap;
                bs.seed = derive_seed(cfg_.seed, "bootstrap:transfer");
                res.transfer = transfer_report(recs.front().condition, recs, *target_, bs);
            }
        }
    }
    return res;
}

void ExperimentRunner::emit(const RunResults& res, ReportFormat format) const {
    const auto merged = res.merged();
    std::vector<TokenRow> tokens;
    std::vector<TemplateShare> shares;
    for (const auto& a : res.arms) {
        tokens.insert(tokens.end(), a.tokens.begin(), a.tokens.end());
        for (auto s : a.best_template) {
            if (res.arms.size() > 1) s.templ = a.name + "/" + s.templ;
            shares.push_back(s);
        }
    }

    if (format != ReportFormat::plot) {
        const auto dir = run_dir_ / "tables";
        write_csv(dir / "summary.csv", summary_table(merged));
        write_csv(dir / "per_question.csv", per_question_table(merged));
        write_csv(dir / "tokens.csv", token_table(tokens));
        if (!shares.empty()) write_csv(dir / "best_template.csv", best_template_table(shares));
        if (!res.sweep.empty()) write_csv(dir / "sweep.csv", sweep_table(res.sweep));
        if (!res.selection.empty()) {
            Table t{{"respondent_id", "source_accuracy", "selected"}, {}};
            for (const auto& s : res.selection) {
                t.rows.push_back({s.respondent_id, format_number(s.source_accuracy), s.selected ? "1" : "0"});
            }
            write_csv(dir / "cross_study_selection.csv", t);
        }
        write_file(run_dir_ / "report.json", to_json(res).dump(2) + "\n");
    }

    if (format != ReportFormat::table) {
        const auto dir = run_dir_ / "plots";
        for (const auto* metric : {"acc", "tv_complement"}) {
            std::vector<Bar> bars;
            for (const auto& c : merged.conditions) {
                if (const auto m = c.metric(metric)) bars.push_back({c.condition, m->value, m->ci});
            }
            if (bars.empty()) continue;
            const std::string title = std::string(metric) == "acc" ? "Individual accuracy" : "1 - TVD";
            write_file(dir / (std::string(metric) + ".svg"), bar_chart_svg(title, metric, bars));
        }
        if (!shares.empty()) {
            std::vector<Bar> bars;
            for (const auto& s : shares) bars.push_back({s.templ, s.fraction, std::nullopt});
            write_file(dir / "best_template.svg", bar_chart_svg("Best template share", "fraction", bars));
        }
        std::vector<Bar> basic_best;
        for (const auto& c : merged.conditions) {
            const bool basic = c.condition.ends_with("persona:basic");
            const bool best = c.condition.ends_with(std::string(kBestTemplate));
            if ((basic || best) && c.acc) basic_best.push_back({c.condition, c.acc->value, c.acc->ci});
        }
        if (!shares.empty() && basic_best.size() >= 2) {
            write_file(dir / "basic_vs_best.svg", bar_chart_svg("Basic vs best template", "acc", basic_best));
        }
        if (!res.sweep.empty()) {
            std::vector<Bar> bars;
            for (const auto& p : res.sweep) {
                if (p.report.tv_complement) {
                    bars.push_back({"I=" + std::to_string(p.iterations), p.report.tv_complement->value,
                                    p.report.tv_complement->ci});
                }
            }
            write_file(dir / "sweep.svg", bar_chart_svg("1 - TVD by iterations", "tv_complement", bars));
        }
    }
}

void ExperimentRunner::persist_calls() const {
    const auto path = run_dir_ / "calls.jsonl";
    std::map<std::string, llm::CallRecord> merged;
    auto add = [&merged](const llm::CallRecord& r) {
        const auto key = llm::cache_key(r.model_id, r.prompt_digest, r.temperature, r.sample_index);
        auto [it, inserted] = merged.emplace(key, r);
        if (!inserted && r.request_tag < it->second.request_tag) it->second = r;
    };
    if (fs::exists(path)) {
        for (const auto& r : llm::read_call_log(path)) add(r);
    }
    for (const auto& r : gateway_->call_log()) add(r);
    std::vector<llm::CallRecord> out;
    for (auto& [_, r] : merged) out.push_back(std::move(r));
    llm::write_call_log(path, out);
}

void ExperimentRunner::write_manifest(const std::string& stage) const {
    const auto path = run_dir_ / "manifest.json";
    json m = fs::exists(path) ? json::parse(read_file(path)) : json::object();
    const auto now = now_utc();
    if (!m.contains("created_at")) m["created_at"] = now;
    m["updated_at"] = now;
    m["run_id"] = cfg_.run_id;
    m["design"] = to_string(cfg_.design);
    m["config_digest"] = sha256_hex(to_json(cfg_).dump());
    m["backend"] = backend_->kind();
    json datasets{{"source", {{"path", cfg_.dataset.string()}, {"sha256", sha256_file(cfg_.dataset)}}}};
    if (cfg_.target_dataset) {
        datasets["target"] = {{"path", cfg_.target_dataset->string()}, {"sha256", sha256_file(*cfg_.target_dataset)}};
    }
    m["datasets"] = datasets;
    if (!m.contains("stages")) m["stages"] = json::array();
    m["stages"].push_back(stage);

    const auto now_stats = gateway_->stats();
    json calls = m.value("calls", json::object());
    auto bump = [&calls](const std::string& key, std::int64_t delta) {
        calls[key] = calls.value(key, std::int64_t{0}) + delta;
    };
    for (auto role : {llm::Role::generation, llm::Role::prediction, llm::Role::feedback}) {
        const auto name = std::string(llm::to_string(role));
        bump("requests_" + name, now_stats.requests(role) - reported_.requests(role));
    }
    std::int64_t hits_now = 0, hits_before = 0;
    for (const auto& [_, c] : now_stats.by_role) hits_now += c.cache_hits;
    for (const auto& [_, c] : reported_.by_role) hits_before += c.cache_hits;
    bump("backend_calls", now_stats.backend_calls() - reported_.backend_calls());
    bump("cache_hits", hits_now - hits_before);
    bump("retries", now_stats.retries - reported_.retries);
    bump("prompt_tokens", now_stats.prompt_tokens - reported_.prompt_tokens);
    bump("output_tokens", now_stats.output_tokens - reported_.output_tokens);
    calls["max_calls"] = cfg_.gateway.max_calls;
    calls["max_total_tokens"] = cfg_.gateway.max_total_tokens;
    m["calls"] = calls;
    reported_ = now_stats;

    std::vector<std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(run_dir_)) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), run_dir_).generic_string();
        if (rel == "manifest.json" || rel.starts_with("cache/")) continue;
        files.push_back(rel);
    }
    std::sort(files.begin(), files.end());
    json artifacts = json::array();
    for (const auto& f : files) {
        artifacts.push_back({{"path", f}, {"sha256", sha256_file(run_dir_ / f)}, {"bytes", fs::file_size(run_dir_ / f)}});
    }
    m["artifacts"] = artifacts;
    write_file(path, m.dump(2) + "\n");
}

ExperimentRunner open_run(const fs::path& run_dir, std::shared_ptr<llm::Backend> backend) {
    const auto cfg_path = run_dir / "config.json";
    if (!fs::exists(cfg_path)) throw IoError("no run at " + run_dir.string());
    auto cfg = config_from_json(json::parse(read_file(cfg_path)));
    cfg.output_dir = run_dir.parent_path();
    cfg.run_id = run_dir.filename().string();
    return ExperimentRunner(std::move(cfg), std::move(backend));
}

ReplayOutcome replay_run(const fs::path& run_dir) {
    const auto manifest_path = run_dir / "manifest.json";
    if (!fs::exists(manifest_path)) throw IoError("no manifest in " + run_dir.string());
    const auto original = json::parse(read_file(manifest_path));
    auto cfg = config_from_json(json::parse(read_file(run_dir / "config.json")));
    cfg.output_dir = run_dir.parent_path();
    cfg.run_id = run_dir.filename().string() + "-replay";
    cfg.backend = BackendConfig{};
    cfg.backend.kind = "replay";
    cfg.backend.replay_log = run_dir / "calls.jsonl";
    cfg.gateway.cache_enabled = false;
    cfg.gateway.cache_dir.reset();
    cfg.gateway.max_calls = 0;
    cfg.gateway.max_total_tokens = 0;

    ReplayOutcome out;
    out.replay_dir = cfg.output_dir / cfg.run_id;
    fs::remove_all(out.replay_dir);
    ExperimentRunner runner(cfg);
    for (const auto& stage : original.at("stages")) {
        const auto s = stage.get<std::string>();
        if (s == "optimize") runner.optimize();
        else if (s == "evaluate") runner.evaluate();
        else if (s == "report") runner.emit(runner.results(), ReportFormat::all);
    }

    const auto replayed = json::parse(read_file(out.replay_dir / "manifest.json"));
    std::map<std::string, std::string> a, b;
    for (const auto& e : original.at("artifacts")) a[e.at("path").get<std::string>()] = e.at("sha256").get<std::string>();
    for (const auto& e : replayed.at("artifacts")) b[e.at("path").get<std::string>()] = e.at("sha256").get<std::string>();
    std::set<std::string> paths;
    for (const auto& [p, _] : a) paths.insert(p);
    for (const auto& [p, _] : b) paths.insert(p);
    for (const auto& p : paths) {
        if (p == "config.json") continue;
        out.compared.push_back(p);
        auto ia = a.find(p);
        auto ib = b.find(p);
        if (ia == a.end() || ib == b.end() || ia->second != ib->second) out.mismatched.push_back(p);
    }
    return out;
}

namespace {

RunResults run_design(const ExperimentConfig& cfg, Design expected) {
    if (cfg.design != expected) {
        throw ConfigError("config design is " + std::string(to_string(cfg.design)) + ", expected " +
                          std::string(to_string(expected)));
    }
    ExperimentRunner runner(cfg);
    return runner.run();
}

}  // namespace

RunResults run_in_study(const ExperimentConfig& cfg) { return run_design(cfg, Design::in_study); }
RunResults run_cross_study(const ExperimentConfig& cfg) { return run_design(cfg, Design::cross_study); }
RunResults run_theory_comparison(const ExperimentConfig& cfg) { return run_design(cfg, Design::theory_comparison); }
RunResults run_attitude_behavior(const ExperimentConfig& cfg) { return run_design(cfg, Design::attitude_behavior); }

RunResults run_iteration_sweep(ExperimentConfig cfg, std::vector<int> iteration_values) {
    cfg.design = Design::iteration_sweep;
    cfg.iteration_values = std::move(iteration_values);
    return run_design(cfg, Design::iteration_sweep);
}

}  // namespace privsim
