#include <gtest/gtest.h>

#include "privsim/errors.hpp"
#include "privsim/llm/gateway.hpp"
#include "privsim/llm/mock_backend.hpp"
#include "support/fixtures.hpp"

using namespace privsim;
using namespace privsim::llm;
using privsim::testing::quiet_gateway;
using privsim::testing::TempDir;

namespace {

ModelRequest req(std::string prompt, Role role = Role::prediction, double temperature = 0.0) {
    ModelRequest r;
    r.role = role;
    r.model_id = "m";
    r.prompt = std::move(prompt);
    r.temperature = temperature;
    r.request_tag = "t";
    return r;
}

}  // namespace

TEST(Gateway, CachesBySampleIndex) {
    auto mock = std::make_shared<ScriptedMock>();
    mock->on_prompt("hello", {"a", "b", "c"});
    Gateway gw(mock, quiet_gateway());
    EXPECT_EQ(gw.complete(req("hello"), 0).text, "a");
    const auto again = gw.complete(req("hello"), 0);
    EXPECT_EQ(again.text, "a");
    EXPECT_TRUE(again.cached);
    EXPECT_EQ(gw.complete(req("hello"), 1).text, "b");
    EXPECT_EQ(gw.complete(req("hello", Role::prediction, 0.5), 0).text, "c");
    EXPECT_EQ(mock->call_count(), 3u);
    const auto s = gw.stats();
    EXPECT_EQ(s.requests(Role::prediction), 4);
    EXPECT_EQ(s.by_role.at(Role::prediction).cache_hits, 1);
    EXPECT_EQ(s.backend_calls(), 3);
    EXPECT_EQ(gw.call_log().size(), 3u);
}

TEST(Gateway, CacheCanBeDisabled) {
    auto mock = std::make_shared<ScriptedMock>();
    mock->set_default("x");
    auto cfg = quiet_gateway();
    cfg.cache_enabled = false;
    Gateway gw(mock, cfg);
    gw.complete(req("p"));
    gw.complete(req("p"));
    EXPECT_EQ(mock->call_count(), 2u);
}

TEST(Gateway, RetriesTransientFailures) {
    auto mock = std::make_shared<ScriptedMock>();
    mock->set_default("ok").fail_next(2);
    Gateway gw(mock, quiet_gateway());
    const auto r = gw.complete(req("p"));
    EXPECT_EQ(r.text, "ok");
    EXPECT_EQ(r.retries, 2);
    EXPECT_EQ(gw.stats().retries, 2);
}

TEST(Gateway, GivesUpAfterRetryLimit) {
    auto mock = std::make_shared<ScriptedMock>();
    mock->set_default("ok").fail_next(3);
    Gateway gw(mock, quiet_gateway());
    EXPECT_THROW(gw.complete(req("p")), BackendUnavailable);
    EXPECT_EQ(mock->failures_injected(), 3);
}

TEST(Gateway, PermanentErrorsAreNotRetried) {
    auto mock = std::make_shared<ScriptedMock>();
    mock->set_strict(true).on_prompt("p", {"one"});
    Gateway gw(mock, quiet_gateway());
    gw.complete(req("p"), 0);
    EXPECT_THROW(gw.complete(req("p"), 1), ScriptExhausted);
    EXPECT_EQ(gw.stats().retries, 0);
}

TEST(Gateway, RejectsInvalidRequests) {
    Gateway gw(std::make_shared<ScriptedMock>(), quiet_gateway());
    EXPECT_THROW(gw.complete(req("")), InvalidRequest);
    EXPECT_THROW(gw.complete(req("p", Role::prediction, -1.0)), InvalidRequest);
}

TEST(Gateway, EmptyCompletionIsAnError) {
    auto mock = std::make_shared<ScriptedMock>();
    Gateway gw(mock, quiet_gateway());
    EXPECT_THROW(gw.complete(req("p")), EmptyCompletion);
}

TEST(Gateway, CallBudgetIsHard) {
    auto mock = std::make_shared<ScriptedMock>();
    mock->set_default("x");
    auto cfg = quiet_gateway();
    cfg.max_calls = 2;
    Gateway gw(mock, cfg);
    gw.complete(req("a"));
    gw.complete(req("b"));
    gw.complete(req("a"));  // cache hit, free
    EXPECT_THROW(gw.complete(req("c")), BudgetExceeded);
    EXPECT_EQ(mock->call_count(), 2u);
}

TEST(Gateway, ConcurrencyCapBoundsInFlight) {
    auto mock = std::make_shared<ScriptedMock>();
    mock->set_default("x").set_delay(std::chrono::milliseconds(20));
    Gateway gw(mock, quiet_gateway(3));
    std::vector<std::pair<ModelRequest, int>> batch;
    for (int i = 0; i < 12; ++i) batch.emplace_back(req("p" + std::to_string(i)), 0);
    const auto out = gw.complete_many(batch);
    ASSERT_EQ(out.size(), 12u);
    for (const auto& r : out) EXPECT_TRUE(r.ok());
    EXPECT_LE(mock->peak_in_flight(), 3);
    EXPECT_LE(gw.stats().peak_in_flight, 3);
    EXPECT_GE(mock->peak_in_flight(), 2);
}

TEST(Gateway, BatchKeepsPositionsAndReportsErrors) {
    auto mock = std::make_shared<ScriptedMock>();
    mock->on_prompt("good", {"g"});
    Gateway gw(mock, quiet_gateway());
    const auto out = gw.complete_many({{req("good"), 0}, {req("bad"), 0}});
    ASSERT_TRUE(out[0].ok());
    EXPECT_EQ(out[0].response->text, "g");
    EXPECT_FALSE(out[1].ok());
    EXPECT_EQ(out[1].error_kind, "EmptyCompletion");
    EXPECT_THROW(std::rethrow_exception(out[1].error), EmptyCompletion);
}

TEST(Gateway, DiskCacheSurvivesRestart) {
    TempDir dir("cache");
    auto cfg = quiet_gateway();
    cfg.cache_dir = dir.path();
    {
        auto mock = std::make_shared<ScriptedMock>();
        mock->set_default("first");
        Gateway gw(mock, cfg);
        gw.complete(req("p"));
    }
    auto mock = std::make_shared<ScriptedMock>();
    mock->set_default("second");
    Gateway gw(mock, cfg);
    EXPECT_EQ(gw.complete(req("p")).text, "first");
    EXPECT_EQ(mock->call_count(), 0u);
}

TEST(Gateway, ReplayBackendServesRecordedLog) {
    TempDir dir("replay");
    auto mock = std::make_shared<ScriptedMock>();
    mock->on_prompt("p", {"r0", "r1"});
    Gateway gw(mock, quiet_gateway());
    gw.complete(req("p"), 0);
    gw.complete(req("p"), 1);
    write_call_log(dir / "calls.jsonl", gw.call_log());

    auto replay = std::make_shared<ReplayBackend>(dir / "calls.jsonl");
    EXPECT_EQ(replay->size(), 2u);
    Gateway again(replay, quiet_gateway());
    EXPECT_EQ(again.complete(req("p"), 1).text, "r1");
    EXPECT_EQ(again.complete(req("p"), 0).text, "r0");
    EXPECT_THROW(again.complete(req("other"), 0), ReplayMiss);
}

TEST(Gateway, CallRecordJsonRoundTrip) {
    CallRecord r;
    r.role = Role::feedback;
    r.model_id = "m";
    r.temperature = 1.5;
    r.sample_index = 3;
    r.prompt_digest = "abc";
    r.prompt = "p";
    r.text = "t";
    r.usage = {4, 5};
    r.request_tag = "tag";
    const auto back = call_record_from_json(to_json(r));
    EXPECT_EQ(to_json(back), to_json(r));
}

TEST(MockScript, FromJson) {
    auto mock = ScriptedMock::from_json(nlohmann::json::parse(R"({
        "default": "d",
        "rules": [{"contains": "x", "role": "prediction", "responses": ["a", "b"], "mode": "by_sample_index"}]
    })"));
    Gateway gw(mock, quiet_gateway());
    EXPECT_EQ(gw.complete(req("x"), 1).text, "b");
    EXPECT_EQ(gw.complete(req("y"), 0).text, "d");
    EXPECT_EQ(gw.complete(req("x", Role::generation), 0).text, "d");
    EXPECT_THROW(ScriptedMock::from_json(nlohmann::json::parse(R"({"rules": [{"mode": "zigzag"}]})")), ConfigError);
}

TEST(RateLimiter, SpacesCalls) {
    RateLimiter limiter(100.0, 1.0);
    const auto start = std::chrono::steady_clock::now();
    for (int i = 0; i < 6; ++i) limiter.acquire();
    EXPECT_GE(std::chrono::steady_clock::now() - start, std::chrono::milliseconds(40));
}
