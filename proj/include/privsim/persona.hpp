#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "privsim/dataset.hpp"
#include "privsim/prediction.hpp"
#include "privsim/prompts.hpp"

namespace privsim {

enum class StopRule {
    literal,     // stop on acc_best >= early_stop_acc or after I iterations
    stale_best,  // additionally stop after `patience` iterations without improvement
};

std::string_view to_string(StopRule r);
StopRule stop_rule_from_string(std::string_view s);

struct OptimizerParams {
    int B = 5;
    int I = 3;
    double tau = 1.5;
    GenerationTemplate templ = GenerationTemplate::basic;
    double early_stop_acc = 1.0;
    StopRule stop_rule = StopRule::literal;
    int patience = 1;
    double max_unscorable_fraction = 0.5;

    void validate() const;  // throws ConfigError
};

nlohmann::json to_json(const OptimizerParams& p);
OptimizerParams optimizer_params_from_json(const nlohmann::json& j, OptimizerParams base = {});

struct Persona {
    std::string text;
    GenerationTemplate templ = GenerationTemplate::basic;
    std::string respondent_id;
    double gen_accuracy = 0.0;
    int iteration_found = 0;
    std::size_t token_count = 0;
    std::vector<std::pair<int, int>> lineage;  // (iteration, candidate index), oldest first
};

struct FeedbackNote {
    std::string text;
    bool predictiveness = false;
    bool conciseness = true;
    bool generalization = true;
    std::vector<std::string> wrong_questions;
};

struct IterationRecord {
    int iteration = 0;
    std::vector<std::optional<double>> candidate_acc;  // empty = discarded
    double best_so_far = 0.0;
    std::int64_t generation_calls = 0;
    std::int64_t prediction_calls = 0;
    std::int64_t feedback_calls = 0;
};

struct OptimizerTrace {
    std::vector<IterationRecord> iterations;

    int iterations_run() const noexcept { return static_cast<int>(iterations.size()); }
    std::int64_t generation_calls() const;
    std::int64_t prediction_calls() const;
    std::int64_t feedback_calls() const;
    std::vector<double> best_so_far() const;
};

struct OptimizedPersona {
    Persona persona;
    OptimizerTrace trace;
};

nlohmann::json to_json(const OptimizedPersona& p);
OptimizedPersona optimized_persona_from_json(const nlohmann::json& j);
void write_persona_archive(const std::filesystem::path& path, std::span<const OptimizedPersona> personas);
std::vector<OptimizedPersona> read_persona_archive(const std::filesystem::path& path);

/// Scores a narrative on `question_ids`. Throws NoScorableQuestions when
/// nothing parses.
Evaluation evaluate_persona(Predictor& predictor, const Condition& condition, const std::string& text,
                            const SurveyDataset& ds, std::span<const std::string> question_ids,
                            const ResponseSet& responses);

/// One feedback-model call. `wrong_questions` comes from comparing the
/// predictions with the truth, not from the model reply.
FeedbackNote build_feedback(Predictor& predictor, const Persona& persona, std::span<const PredictionRecord> predictions,
                            const SurveyDataset& ds, int sample_index = 0);

/// Generate, score, keep the strict best, critique, regenerate.
OptimizedPersona optimize_persona(Predictor& predictor, const SurveyDataset& ds,
                                  std::span<const std::string> gen_ids, const ResponseSet& responses,
                                  const OptimizerParams& params);

}  // namespace privsim
