#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "privsim/dataset.hpp"
#include "privsim/llm/gateway.hpp"
#include "privsim/prompts.hpp"

namespace privsim {

/// Model ids and sampling settings for the three model roles.
struct ModelSettings {
    std::string generation_model = "generation-model";
    std::string prediction_model = "prediction-model";
    std::string feedback_model = "generation-model";
    double generation_temperature = 1.5;
    double prediction_temperature = 0.0;
    double feedback_temperature = 0.0;
    int max_parse_retries = 2;
    std::optional<int> max_output;
};

enum class ConditionKind { baseline, raw, persona };

struct Condition {
    ConditionKind kind = ConditionKind::baseline;
    GenerationTemplate templ = GenerationTemplate::basic;  // persona only

    /// "baseline", "raw" or "persona:<template>".
    std::string label() const;
    static Condition parse(std::string_view label);  // accepts "persona" for persona:basic
    PredictionTemplate prompt_kind() const;
    bool operator==(const Condition&) const = default;
};

/// One simulated answer. `predicted` is empty when every attempt was
/// unparseable; `truth` is empty when no ground truth exists (cross-study).
struct PredictionRecord {
    std::string respondent_id;
    std::string question_id;
    std::string condition;
    std::optional<std::string> predicted;
    std::optional<std::string> truth;
    std::string prompt_digest;
    int retries_used = 0;
    std::string raw_output;

    bool error() const noexcept { return !predicted.has_value(); }
    bool correct() const noexcept { return predicted && truth && *predicted == *truth; }
};

nlohmann::json to_json(const PredictionRecord& r);
PredictionRecord prediction_from_json(const nlohmann::json& j);
void write_predictions(const std::filesystem::path& path, std::span<const PredictionRecord> records);
std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path);

/// Accuracy over scorable records only; error-marked ones are counted apart.
struct Evaluation {
    std::optional<double> accuracy;
    std::size_t scorable = 0;
    std::size_t correct = 0;
    std::size_t unparseable = 0;
    std::vector<PredictionRecord> predictions;

    bool audit_flag() const noexcept { return unparseable > 0; }
    double unscorable_fraction() const noexcept;
};

Evaluation summarize(std::vector<PredictionRecord> records);

/// Asks the prediction model for answers and maps them onto the answer set,
/// re-asking up to `max_parse_retries` times on unparseable output.
class Predictor {
public:
    Predictor(llm::Gateway& gateway, ModelSettings settings);

    PredictionRecord predict(const Condition& condition, const std::optional<std::string>& text,
                             const QuestionSpec& q, const std::string& respondent_id = {},
                             const std::optional<std::string>& truth = std::nullopt);

    /// All questions for one (respondent, condition, text), batched through
    /// the gateway. Output follows `question_ids` order. Truth comes from
    /// `responses` when present.
    std::vector<PredictionRecord> predict_many(const Condition& condition, const std::optional<std::string>& text,
                                               const SurveyDataset& ds, std::span<const std::string> question_ids,
                                               const ResponseSet& responses);

    /// Same, for a persona with no ground truth (cross-study transfer).
    std::vector<PredictionRecord> predict_many(const Condition& condition, const std::optional<std::string>& text,
                                               const SurveyDataset& ds, std::span<const std::string> question_ids,
                                               const std::string& respondent_id);

    const ModelSettings& settings() const noexcept { return settings_; }
    llm::Gateway& gateway() noexcept { return gateway_; }

private:
    llm::ModelRequest request_for(const Condition& condition, const std::optional<std::string>& text,
                                  const QuestionSpec& q, const std::string& tag) const;

    llm::Gateway& gateway_;
    ModelSettings settings_;
};

enum class CalibrationMode { held_out_calibration, oracle_eval };

std::string_view to_string(CalibrationMode m);
CalibrationMode calibration_mode_from_string(std::string_view s);

struct CalibrationChoice {
    std::string respondent_id;
    GenerationTemplate chosen_template = GenerationTemplate::basic;
    std::map<GenerationTemplate, double> per_template_acc;
    CalibrationMode mode = CalibrationMode::oracle_eval;
};

/// Argmax over templates; ties go to the earliest in basic < bounded <
/// calculus < pmt. Throws NoScorableQuestions when `acc` is empty.
GenerationTemplate select_template(const std::map<GenerationTemplate, double>& acc);

/// Scores every persona on the calibration questions and picks the best.
CalibrationChoice calibrate_select(const std::map<GenerationTemplate, std::string>& personas,
                                   const SurveyDataset& ds, std::span<const std::string> calib_ids,
                                   const ResponseSet& responses, CalibrationMode mode, Predictor& predictor);

/// Calibration slice of an evaluation set: max(min_questions, round(fraction
/// * n)) ids, capped at n - 1 so at least one question remains for scoring.
std::vector<std::string> choose_calibration_questions(const SurveyDataset& ds, std::span<const std::string> eval_ids,
                                                      double fraction, int min_questions, std::uint64_t seed);

}  // namespace privsim
