#include <gtest/gtest.h>

#include "privsim/errors.hpp"
#include "privsim/persona.hpp"
#include "support/fixtures.hpp"

using namespace privsim;
using namespace privsim::testing;
using llm::Role;

namespace {

struct Rig {
    explicit Rig(std::vector<std::string> candidates, int n_questions = 4)
        : mock(accuracy_mock(std::move(candidates))),
          gw(mock, quiet_gateway()),
          predictor(gw, {}),
          ds(yes_dataset(n_questions)),
          gen(ids(n_questions)) {}

    OptimizedPersona run(OptimizerParams p) { return optimize_persona(predictor, ds, gen, ds.respondents()[0], p); }

    std::shared_ptr<llm::ScriptedMock> mock;
    llm::Gateway gw;
    Predictor predictor;
    SurveyDataset ds;
    std::vector<std::string> gen;
};

std::vector<std::string> markers(std::initializer_list<int> ks) {
    std::vector<std::string> out;
    for (int k : ks) out.push_back(persona_marker(k));
    return out;
}

}  // namespace

TEST(Optimizer, FullBudgetWithoutPerfectCandidate) {
    Rig rig(markers({1, 2, 1, 0, 2, 3, 1, 1, 2, 0, 2, 3, 3, 1, 2}));
    const auto out = rig.run({.B = 5, .I = 3});
    EXPECT_EQ(rig.mock->call_count(Role::generation), 15u);
    EXPECT_EQ(rig.mock->call_count(Role::feedback), 2u);
    EXPECT_EQ(out.trace.iterations_run(), 3);
    EXPECT_EQ(out.trace.generation_calls(), 15);
    EXPECT_EQ(out.trace.feedback_calls(), 2);
    EXPECT_EQ(out.persona.text, persona_marker(3));
    EXPECT_DOUBLE_EQ(out.persona.gen_accuracy, 0.75);
    EXPECT_EQ(out.persona.iteration_found, 2);
    EXPECT_EQ(out.trace.best_so_far(), (std::vector<double>{0.5, 0.75, 0.75}));
}

TEST(Optimizer, EarlyStopOnPerfectAccuracy) {
    Rig rig(markers({2, 3, 3, 4}));
    const auto out = rig.run({.B = 2, .I = 3});
    EXPECT_EQ(out.trace.best_so_far(), (std::vector<double>{0.75, 1.0}));
    EXPECT_EQ(rig.mock->call_count(Role::generation), 4u);
    EXPECT_EQ(rig.mock->call_count(Role::feedback), 1u);
    EXPECT_EQ(out.persona.iteration_found, 2);
    EXPECT_EQ(out.persona.lineage, (std::vector<std::pair<int, int>>{{1, 1}, {2, 1}}));
}

TEST(Optimizer, StopsAfterFirstIterationWhenPerfect) {
    Rig rig(markers({4, 4, 4}));
    const auto out = rig.run({.B = 3, .I = 3});
    EXPECT_EQ(out.trace.iterations_run(), 1);
    EXPECT_EQ(rig.mock->call_count(Role::generation), 3u);
    EXPECT_EQ(rig.mock->call_count(Role::feedback), 0u);
}

TEST(Optimizer, TiesKeepTheIncumbent) {
    Rig rig(markers({2, 2, 2, 2}));
    const auto out = rig.run({.B = 2, .I = 2});
    EXPECT_EQ(out.persona.iteration_found, 1);
    EXPECT_EQ(out.persona.lineage, (std::vector<std::pair<int, int>>{{1, 0}}));
}

TEST(Optimizer, UsesGenerationThenRefinePrompts) {
    Rig rig(markers({1, 2, 3}));
    rig.run({.B = 1, .I = 3});
    std::vector<std::string> gen_prompts;
    for (const auto& c : rig.mock->calls()) {
        if (c.role == Role::generation) gen_prompts.push_back(c.prompt);
    }
    ASSERT_EQ(gen_prompts.size(), 3u);
    EXPECT_NE(gen_prompts[0].find("User History"), std::string::npos);
    EXPECT_NE(gen_prompts[1].find(persona_marker(1)), std::string::npos);
    EXPECT_NE(gen_prompts[1].find("tighten it"), std::string::npos);
    EXPECT_NE(gen_prompts[2].find(persona_marker(2)), std::string::npos);
}

TEST(Optimizer, SampleIndicesAreDistinctAcrossIterations) {
    Rig rig(markers({0, 0, 0, 0, 0, 0}));
    rig.run({.B = 2, .I = 3});
    std::vector<int> idx;
    for (const auto& c : rig.mock->calls()) {
        if (c.role == Role::generation) idx.push_back(c.sample_index);
    }
    std::sort(idx.begin(), idx.end());
    EXPECT_EQ(idx, (std::vector<int>{0, 1, 2, 3, 4, 5}));
}

TEST(Optimizer, DiscardsMostlyUnscorableCandidates) {
    Rig rig({"abstain=3", persona_marker(1)});
    const auto out = rig.run({.B = 2, .I = 1});
    ASSERT_EQ(out.trace.iterations.size(), 1u);
    const auto& acc = out.trace.iterations[0].candidate_acc;
    EXPECT_FALSE(acc[0].has_value());
    EXPECT_DOUBLE_EQ(*acc[1], 0.25);
    EXPECT_EQ(out.persona.text, persona_marker(1));
}

TEST(Optimizer, AllCandidatesFailing) {
    Rig rig({"abstain=4", "abstain=3"});
    EXPECT_THROW(rig.run({.B = 2, .I = 2}), AllCandidatesFailed);
}

TEST(Optimizer, StaleBestStopsEarly) {
    Rig rig(markers({2, 1, 1, 1}));
    const auto out = rig.run({.B = 1, .I = 4, .stop_rule = StopRule::stale_best, .patience = 1});
    EXPECT_EQ(out.trace.iterations_run(), 2);
    EXPECT_EQ(rig.mock->call_count(Role::feedback), 1u);
}

TEST(Optimizer, ValidatesParams) {
    Rig rig(markers({1}));
    EXPECT_THROW(rig.run({.B = 0}), ConfigError);
    EXPECT_THROW(rig.run({.I = 0}), ConfigError);
    EXPECT_THROW(rig.run({.tau = -1.0}), ConfigError);
    EXPECT_THROW(optimize_persona(rig.predictor, rig.ds, {}, rig.ds.respondents()[0], {}), EmptyScopeError);
}

TEST(EvaluatePersona, ThrowsWhenNothingParses) {
    Rig rig({});
    EXPECT_THROW(evaluate_persona(rig.predictor, Condition::parse("persona"), "abstain=4", rig.ds, rig.gen,
                                  rig.ds.respondents()[0]),
                 NoScorableQuestions);
    const auto ev = evaluate_persona(rig.predictor, Condition::parse("persona"), persona_marker(2), rig.ds, rig.gen,
                                     rig.ds.respondents()[0]);
    EXPECT_DOUBLE_EQ(*ev.accuracy, 0.5);
}

TEST(Feedback, ListsWrongQuestionsFromTruth) {
    Rig rig({});
    Persona persona{persona_marker(2), GenerationTemplate::basic, "r1"};
    const auto preds = rig.predictor.predict_many(Condition::parse("persona"), persona.text, rig.ds, rig.gen,
                                                  rig.ds.respondents()[0]);
    const auto note = build_feedback(rig.predictor, persona, preds, rig.ds, 1);
    EXPECT_EQ(note.text, "tighten it");
    EXPECT_EQ(note.wrong_questions, (std::vector<std::string>{"q03", "q04"}));
    EXPECT_TRUE(note.predictiveness);
    const auto calls = rig.mock->calls();
    EXPECT_EQ(calls.back().role, Role::feedback);
    EXPECT_EQ(calls.back().sample_index, 1);
    EXPECT_NE(calls.back().prompt.find("Actual answer: Yes"), std::string::npos);
}

TEST(PersonaArchive, RoundTrip) {
    Rig rig(markers({1, 3}));
    const auto out = rig.run({.B = 1, .I = 2});
    TempDir dir("archive");
    std::vector<OptimizedPersona> v{out};
    write_persona_archive(dir / "p.jsonl", v);
    const auto back = read_persona_archive(dir / "p.jsonl");
    ASSERT_EQ(back.size(), 1u);
    EXPECT_EQ(to_json(back[0]), to_json(out));
}

TEST(OptimizerParams, JsonRoundTrip) {
    OptimizerParams p{.B = 3, .I = 2, .tau = 0.7, .templ = GenerationTemplate::pmt, .stop_rule = StopRule::stale_best};
    const auto back = optimizer_params_from_json(to_json(p));
    EXPECT_EQ(to_json(back), to_json(p));
    EXPECT_EQ(optimizer_params_from_json({{"B", 9}}).I, 3);
}
