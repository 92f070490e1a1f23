#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "privsim/llm/backend.hpp"

namespace privsim::llm {

/// Computes a reply from the request; used for rule-following fixtures.
using Responder = std::function<std::string(const ModelRequest&, int sample_index)>;

struct MockRule {
    enum class ListMode {
        sequential,       // each matching call takes the next listed response
        by_sample_index,  // response = responses[sample_index]
    };

    std::string prompt_contains;          // empty matches everything
    std::string tag_contains;             // empty matches everything
    std::optional<Role> role;
    std::vector<std::string> responses;   // used when no responder is set
    Responder responder;
    ListMode mode = ListMode::sequential;
};

struct MockCall {
    std::string prompt;
    Role role;
    int sample_index;
    std::string request_tag;
    std::string reply;
};

/// Deterministic scripted backend. Rules are tried in insertion order; the
/// first match answers. Every call is logged.
class ScriptedMock : public Backend {
public:
    ScriptedMock() = default;

    ScriptedMock& on(MockRule rule);
    ScriptedMock& on_prompt(std::string contains, std::vector<std::string> responses);
    ScriptedMock& on_role(Role role, Responder responder);
    ScriptedMock& set_default(std::string text);
    ScriptedMock& set_strict(bool strict);

    /// The next `n` calls throw TransientBackendError before any rule runs.
    ScriptedMock& fail_next(int n);
    /// Simulated service time, makes concurrency observable.
    ScriptedMock& set_delay(std::chrono::milliseconds d);

    BackendReply call(const ModelRequest& req, int sample_index) override;
    std::string kind() const override { return "mock"; }

    std::vector<MockCall> calls() const;
    std::size_t call_count() const;
    std::size_t call_count(Role role) const;
    int peak_in_flight() const;
    int failures_injected() const;

    /// {"default": str, "strict": bool, "rules": [{"contains", "tag", "role",
    ///  "responses", "mode"}]}
    static std::shared_ptr<ScriptedMock> from_json(const nlohmann::json& script);
    static std::shared_ptr<ScriptedMock> from_file(const std::filesystem::path& path);

private:
    mutable std::mutex mu_;
    std::vector<MockRule> rules_;
    std::vector<std::size_t> cursor_;
    std::string default_text_;
    bool strict_ = false;
    int pending_failures_ = 0;
    int failures_injected_ = 0;
    std::chrono::milliseconds delay_{0};
    std::vector<MockCall> log_;
    int in_flight_ = 0;
    int peak_in_flight_ = 0;
};

/// Serves responses from a previously recorded call log, keyed exactly like
/// the gateway cache. A miss is a ReplayMiss error.
class ReplayBackend : public Backend {
public:
    explicit ReplayBackend(const std::filesystem::path& call_log);

    BackendReply call(const ModelRequest& req, int sample_index) override;
    std::string kind() const override { return "replay"; }
    std::size_t size() const noexcept { return entries_.size(); }

private:
    std::map<std::string, BackendReply> entries_;
};

}  // namespace privsim::llm
