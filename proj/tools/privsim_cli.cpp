// privsim: command-line front end for persona optimization runs.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "privsim/dataset.hpp"
#include "privsim/digest.hpp"
#include "privsim/errors.hpp"
#include "privsim/experiment.hpp"
#include "privsim/synthetic.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace privsim;

namespace {

constexpr int kExitError = 2;
constexpr int kExitReplayMismatch = 4;
constexpr int kExitInternal = 1;

void print_error(const std::string& kind, const std::string& message) {
    std::cerr << json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << '\n';
}

fs::path run_path(const std::string& run, const std::string& runs_dir) {
    if (fs::is_directory(run)) return run;
    return fs::path(runs_dir) / run;
}

json metric_json(const std::optional<MetricValue>& m) {
    if (!m) return nullptr;
    json j{{"value", m->value}};
    if (m->ci) j["ci"] = {m->ci->lo, m->ci->hi};
    return j;
}

json summary(const ExperimentRunner& runner, const RunResults& res) {
    json conds = json::array();
    for (const auto& c : res.merged().conditions) {
        conds.push_back({{"condition", c.condition},
                         {"acc", metric_json(c.acc)},
                         {"tv_complement", metric_json(c.tv_complement)},
                         {"mee", metric_json(c.mee)},
                         {"wd", metric_json(c.wd)}});
    }
    const auto stats = runner.gateway_stats();
    return {{"run_dir", runner.run_dir().string()},
            {"design", to_string(res.design)},
            {"conditions", conds},
            {"backend_calls", stats.backend_calls()}};
}

int cmd_ingest(const std::string& file) {
    LoadReport report;
    const auto ds = load_dataset(file, &report);
    json domains = json::object();
    for (const auto& [d, ids] : partition_by_domain(ds)) domains[std::string(to_string(d))] = ids.size();
    std::cout << json{{"name", ds.name()},
                      {"questions", ds.questions().size()},
                      {"respondents", ds.respondents().size()},
                      {"domains", domains},
                      {"discarded_responses", report.discarded_responses},
                      {"warnings", report.warnings},
                      {"sha256", sha256_file(file)}}
                     .dump(2)
              << '\n';
    return 0;
}

int cmd_synth(const std::string& out, const SyntheticSpec& spec) {
    write_file(out, dataset_to_json(make_synthetic_dataset(spec)).dump(2) + "\n");
    std::cout << json{{"written", out}, {"questions", spec.questions}, {"respondents", spec.respondents}}.dump(2) << '\n';
    return 0;
}

ExperimentConfig config_with_overrides(const std::string& path, const std::string& run_id) {
    auto cfg = load_config(path);
    if (!run_id.empty()) cfg.run_id = run_id;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Privacy persona simulation runs"};
    app.require_subcommand(1);

    std::string file, config, run, run_id, runs_dir = "runs", format = "table";
    SyntheticSpec spec;

    auto* ingest = app.add_subcommand("ingest", "Validate a survey dataset and print a summary");
    ingest->add_option("file", file, "Dataset JSON")->required();

    auto* synth = app.add_subcommand("synth", "Write a rule-following synthetic dataset");
    synth->add_option("--out", file, "Output path")->required();
    synth->add_option("--questions", spec.questions);
    synth->add_option("--respondents", spec.respondents);
    synth->add_option("--types", spec.types);
    synth->add_option("--seed", spec.seed);
    synth->add_option("--gap", spec.attitude_behavior_gap, "Fraction with an attitude/behavior gap");

    auto* optimize = app.add_subcommand("optimize", "Split questions and optimize personas");
    optimize->add_option("--config", config)->required();
    optimize->add_option("--run-id", run_id);

    auto* evaluate = app.add_subcommand("evaluate", "Predict, score and report an optimized run");
    evaluate->add_option("--run", run)->required();
    evaluate->add_option("--runs-dir", runs_dir);

    auto* cross = app.add_subcommand("cross-study", "Optimize on a source study and transfer to a target");
    cross->add_option("--config", config)->required();
    cross->add_option("--run-id", run_id);

    auto* full = app.add_subcommand("run", "optimize + evaluate for any design");
    full->add_option("--config", config)->required();
    full->add_option("--run-id", run_id);

    auto* report = app.add_subcommand("report", "Regenerate tables or plots of a run");
    report->add_option("--run", run)->required();
    report->add_option("--runs-dir", runs_dir);
    report->add_option("--format", format)->check(CLI::IsMember({"table", "plot"}));

    auto* replay = app.add_subcommand("replay", "Re-execute a run from its call log and compare artifacts");
    replay->add_option("--run", run)->required();
    replay->add_option("--runs-dir", runs_dir);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*ingest) return cmd_ingest(file);
        if (*synth) return cmd_synth(file, spec);
        if (*optimize) {
            ExperimentRunner runner(config_with_overrides(config, run_id));
            runner.optimize();
            std::cout << json{{"run_dir", runner.run_dir().string()},
                              {"backend_calls", runner.gateway_stats().backend_calls()}}
                             .dump(2)
                      << '\n';
            return 0;
        }
        if (*evaluate) {
            auto runner = open_run(run_path(run, runs_dir));
            const auto res = runner.evaluate();
            std::cout << summary(runner, res).dump(2) << '\n';
            return 0;
        }
        if (*cross || *full) {
            auto cfg = config_with_overrides(config, run_id);
            if (*cross && cfg.design != Design::cross_study) {
                throw ConfigError("cross-study needs a config with design cross_study");
            }
            ExperimentRunner runner(cfg);
            const auto res = runner.run();
            std::cout << summary(runner, res).dump(2) << '\n';
            return 0;
        }
        if (*report) {
            auto runner = open_run(run_path(run, runs_dir));
            const auto fmt_kind = report_format_from_string(format);
            runner.emit(runner.results(), fmt_kind);
            std::cout << json{{"run_dir", runner.run_dir().string()}, {"format", format}}.dump(2) << '\n';
            return 0;
        }
        if (*replay) {
            const auto out = replay_run(run_path(run, runs_dir));
            std::cout << json{{"replay_dir", out.replay_dir.string()},
                              {"compared", out.compared.size()},
                              {"mismatched", out.mismatched}}
                             .dump(2)
                      << '\n';
            if (!out.identical()) {
                print_error("ReplayMismatch", fmt::format("{} artifact(s) differ", out.mismatched.size()));
                return kExitReplayMismatch;
            }
            return 0;
        }
    } catch (const Error& e) {
        print_error(e.kind(), e.what());
        return kExitError;
    } catch (const std::exception& e) {
        print_error("InternalError", e.what());
        return kExitInternal;
    }
    return 0;
}
