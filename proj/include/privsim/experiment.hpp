#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "privsim/dataset.hpp"
#include "privsim/llm/gateway.hpp"
#include "privsim/llm/remote_backend.hpp"
#include "privsim/metrics.hpp"
#include "privsim/persona.hpp"
#include "privsim/prediction.hpp"
#include "privsim/report.hpp"

namespace privsim {

enum class Design { in_study, cross_study, theory_comparison, attitude_behavior, iteration_sweep };

std::string_view to_string(Design d);
Design design_from_string(std::string_view s);

struct BackendConfig {
    std::string kind = "synthetic";  // synthetic | mock | remote | replay
    std::filesystem::path script;    // mock
    int synthetic_types = 4;         // synthetic
    llm::RemoteConfig remote;        // remote
    std::filesystem::path replay_log;
};

struct ExperimentConfig {
    std::string run_id;
    Design design = Design::in_study;
    std::filesystem::path dataset;
    std::optional<std::filesystem::path> target_dataset;
    std::filesystem::path output_dir = "runs";
    std::uint64_t seed = 0;

    double split_ratio = 0.8;
    SplitScope scope = SplitScope::all;
    SplitScope target_scope = SplitScope::all;

    OptimizerParams optimizer;
    std::map<GenerationTemplate, nlohmann::json> optimizer_overrides;
    std::vector<GenerationTemplate> templates;  // empty = design default
    std::vector<std::string> conditions;        // empty = design default

    double selection_threshold = 0.70;
    bool filter_in_study = false;

    CalibrationMode calibration_mode = CalibrationMode::held_out_calibration;
    double calibration_fraction = 0.2;
    int calibration_min = 2;

    std::vector<int> iteration_values{1, 2, 3};

    ModelSettings models;
    llm::GatewayConfig gateway;
    BackendConfig backend;
    BootstrapSettings bootstrap;
    int workers = 4;
    std::optional<std::filesystem::path> persona_archive;

    void validate() const;  // throws ConfigError

    /// Templates and conditions after design defaults are applied.
    std::vector<GenerationTemplate> effective_templates() const;
    std::vector<std::string> effective_conditions() const;
    OptimizerParams params_for(GenerationTemplate t) const;
};

/// Relative paths are resolved against `base_dir`.
ExperimentConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::json to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);

std::shared_ptr<llm::Backend> make_backend(const BackendConfig& cfg, const SurveyDataset& source);

/// Runs fn(0..n-1) on up to `workers` threads. Rethrows the exception of the
/// lowest failing index after all workers finish.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

/// Splits for the attitude -> behavioral arm: every answered attitude
/// question generates, every answered behavioral question evaluates.
SplitResult attitude_behavior_splits(const SurveyDataset& ds, std::uint64_t seed);

/// Respondent ids whose source accuracy is at least `threshold`, sorted.
std::vector<std::string> select_personas(const std::map<std::string, double>& source_accuracy, double threshold);

/// Every persona answers every question of `target` in `question_ids`.
std::vector<PredictionRecord> transfer_predictions(Predictor& predictor, std::span<const OptimizedPersona> personas,
                                                   const SurveyDataset& target,
                                                   std::span<const std::string> question_ids, int workers = 1);

/// One generation/evaluation arrangement of a design. in_study and
/// theory_comparison have a single arm, attitude_behavior has two,
/// iteration_sweep one per I value, cross_study a source arm.
struct ArmPlan {
    std::string name;
    SplitResult split;
    std::vector<GenerationTemplate> templates;
    std::optional<int> iterations;  // overrides optimizer I
};

std::vector<ArmPlan> plan_arms(const ExperimentConfig& cfg, const SurveyDataset& ds);

struct ArmResults {
    std::string name;
    FidelityReport report;
    std::vector<TemplateShare> best_template;
    std::vector<TokenRow> tokens;
    std::size_t skipped_respondents = 0;
    std::size_t failed_optimizations = 0;
};

struct TransferSelection {
    std::string respondent_id;
    double source_accuracy = 0.0;
    bool selected = false;
};

struct RunResults {
    Design design = Design::in_study;
    std::vector<ArmResults> arms;
    std::optional<ConditionReport> transfer;
    std::vector<TransferSelection> selection;
    std::vector<SweepPoint> sweep;

    /// Every condition of every arm; labels carry an "<arm>/" prefix when
    /// there is more than one arm.
    FidelityReport merged() const;
};

nlohmann::json to_json(const RunResults& r);

enum class ReportFormat { table, plot, all };
ReportFormat report_format_from_string(std::string_view s);

struct ReplayOutcome {
    std::filesystem::path replay_dir;
    std::vector<std::string> compared;
    std::vector<std::string> mismatched;

    bool identical() const noexcept { return mismatched.empty(); }
};

/// Runs of one experiment live in <output_dir>/<run_id>/. Stages persist
/// their artifacts; a later stage or process picks them up from disk.
class ExperimentRunner {
public:
    explicit ExperimentRunner(ExperimentConfig cfg, std::shared_ptr<llm::Backend> backend = nullptr);

    /// Splits and persona optimization for every arm.
    void optimize();
    /// Predictions, metrics and reports. Runs optimize() first when its
    /// artifacts are missing.
    RunResults evaluate();
    /// optimize + evaluate.
    RunResults run();

    /// Recomputes results from the persisted artifacts.
    RunResults results() const;
    void emit(const RunResults& results, ReportFormat format) const;

    const std::filesystem::path& run_dir() const noexcept { return run_dir_; }
    const ExperimentConfig& config() const noexcept { return cfg_; }
    const SurveyDataset& dataset() const noexcept { return *source_; }
    llm::GatewayStats gateway_stats() const;

private:
    std::filesystem::path arm_dir(const std::string& arm) const;
    bool optimized() const;
    void persist_calls() const;
    void write_manifest(const std::string& stage) const;

    ExperimentConfig cfg_;
    std::filesystem::path run_dir_;
    std::unique_ptr<SurveyDataset> source_;
    std::unique_ptr<SurveyDataset> target_;
    std::shared_ptr<llm::Backend> backend_;
    std::unique_ptr<llm::Gateway> gateway_;
    mutable llm::GatewayStats reported_;
};

/// Opens an existing run directory from its stored config.
ExperimentRunner open_run(const std::filesystem::path& run_dir, std::shared_ptr<llm::Backend> backend = nullptr);

/// Re-executes the recorded stages of a run against its call log and compares
/// every artifact digest with the original.
ReplayOutcome replay_run(const std::filesystem::path& run_dir);

RunResults run_in_study(const ExperimentConfig& cfg);
RunResults run_cross_study(const ExperimentConfig& cfg);
RunResults run_theory_comparison(const ExperimentConfig& cfg);
RunResults run_attitude_behavior(const ExperimentConfig& cfg);
RunResults run_iteration_sweep(ExperimentConfig cfg, std::vector<int> iteration_values);

}  // namespace privsim
