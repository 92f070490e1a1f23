#include "privsim/llm/mock_backend.hpp"

#include <algorithm>
#include <cctype>
#include <thread>

#include "privsim/digest.hpp"
#include "privsim/errors.hpp"
#include "privsim/llm/gateway.hpp"

namespace privsim::llm {

using nlohmann::json;

ScriptedMock& ScriptedMock::on(MockRule rule) {
    std::lock_guard lock(mu_);
    rules_.push_back(std::move(rule));
    cursor_.push_back(0);
    return *this;
}

ScriptedMock& ScriptedMock::on_prompt(std::string contains, std::vector<std::string> responses) {
    MockRule rule;
    rule.prompt_contains = std::move(contains);
    rule.responses = std::move(responses);
    return on(std::move(rule));
}

ScriptedMock& ScriptedMock::on_role(Role role, Responder responder) {
    MockRule rule;
    rule.role = role;
    rule.responder = std::move(responder);
    return on(std::move(rule));
}

ScriptedMock& ScriptedMock::set_default(std::string text) {
    std::lock_guard lock(mu_);
    default_text_ = std::move(text);
    return *this;
}

ScriptedMock& ScriptedMock::set_strict(bool strict) {
    std::lock_guard lock(mu_);
    strict_ = strict;
    return *this;
}

ScriptedMock& ScriptedMock::fail_next(int n) {
    std::lock_guard lock(mu_);
    pending_failures_ += n;
    return *this;
}

ScriptedMock& ScriptedMock::set_delay(std::chrono::milliseconds d) {
    std::lock_guard lock(mu_);
    delay_ = d;
    return *this;
}

BackendReply ScriptedMock::call(const ModelRequest& req, int sample_index) {
    std::chrono::milliseconds delay;
    {
        std::lock_guard lock(mu_);
        ++in_flight_;
        peak_in_flight_ = std::max(peak_in_flight_, in_flight_);
        delay = delay_;
    }
    struct InFlight {
        ScriptedMock* m;
        ~InFlight() {
            std::lock_guard lock(m->mu_);
            --m->in_flight_;
        }
    } in_flight{this};
    if (delay.count() > 0) std::this_thread::sleep_for(delay);

    std::string reply;
    Responder responder;
    {
        std::lock_guard lock(mu_);
        if (pending_failures_ > 0) {
            --pending_failures_;
            ++failures_injected_;
            log_.push_back({req.prompt, req.role, sample_index, req.request_tag, "<transient failure>"});
            throw TransientBackendError("scripted transient failure");
        }
        std::size_t idx = rules_.size();
        for (std::size_t i = 0; i < rules_.size(); ++i) {
            const auto& r = rules_[i];
            if (r.role && *r.role != req.role) continue;
            if (!r.prompt_contains.empty() && req.prompt.find(r.prompt_contains) == std::string::npos) continue;
            if (!r.tag_contains.empty() && req.request_tag.find(r.tag_contains) == std::string::npos) continue;
            idx = i;
            break;
        }
        if (idx == rules_.size()) {
            reply = default_text_;
        } else if (rules_[idx].responder) {
            responder = rules_[idx].responder;
        } else {
            const auto& r = rules_[idx];
            const std::size_t pos = r.mode == MockRule::ListMode::sequential
                                        ? cursor_[idx]++
                                        : static_cast<std::size_t>(std::max(0, sample_index));
            if (pos < r.responses.size()) {
                reply = r.responses[pos];
            } else if (strict_ || r.responses.empty()) {
                throw ScriptExhausted("script for '" + r.prompt_contains + r.tag_contains + "' exhausted after " +
                                      std::to_string(r.responses.size()) + " responses");
            } else {
                reply = r.responses.back();
            }
        }
    }
    if (responder) reply = responder(req, sample_index);

    {
        std::lock_guard lock(mu_);
        log_.push_back({req.prompt, req.role, sample_index, req.request_tag, reply});
    }
    const auto words = [](const std::string& s) {
        std::int64_t n = 0;
        bool in_word = false;
        for (unsigned char c : s) {
            const bool space = std::isspace(c) != 0;
            if (!space && !in_word) ++n;
            in_word = !space;
        }
        return n;
    };
    return BackendReply{reply, Usage{words(req.prompt), words(reply)}};
}

std::vector<MockCall> ScriptedMock::calls() const {
    std::lock_guard lock(mu_);
    return log_;
}

std::size_t ScriptedMock::call_count() const {
    std::lock_guard lock(mu_);
    return log_.size();
}

std::size_t ScriptedMock::call_count(Role role) const {
    std::lock_guard lock(mu_);
    return static_cast<std::size_t>(
        std::count_if(log_.begin(), log_.end(), [role](const MockCall& c) { return c.role == role; }));
}

int ScriptedMock::peak_in_flight() const {
    std::lock_guard lock(mu_);
    return peak_in_flight_;
}

int ScriptedMock::failures_injected() const {
    std::lock_guard lock(mu_);
    return failures_injected_;
}

std::shared_ptr<ScriptedMock> ScriptedMock::from_json(const json& script) {
    auto mock = std::make_shared<ScriptedMock>();
    if (!script.is_object()) throw ConfigError("mock script must be an object");
    mock->set_default(script.value("default", std::string{}));
    mock->set_strict(script.value("strict", false));
    if (script.contains("rules")) {
        for (const auto& jr : script.at("rules")) {
            MockRule rule;
            rule.prompt_contains = jr.value("contains", std::string{});
            rule.tag_contains = jr.value("tag", std::string{});
            if (jr.contains("role")) rule.role = role_from_string(jr.at("role").get<std::string>());
            rule.responses = jr.value("responses", std::vector<std::string>{});
            const auto mode = jr.value("mode", std::string("sequential"));
            if (mode == "by_sample_index") {
                rule.mode = MockRule::ListMode::by_sample_index;
            } else if (mode != "sequential") {
                throw ConfigError("unknown mock list mode '" + mode + "'");
            }
            mock->on(std::move(rule));
        }
    }
    return mock;
}

std::shared_ptr<ScriptedMock> ScriptedMock::from_file(const std::filesystem::path& path) {
    try {
        return from_json(json::parse(read_file(path)));
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

ReplayBackend::ReplayBackend(const std::filesystem::path& call_log) {
    for (const auto& rec : read_call_log(call_log)) {
        entries_.emplace(cache_key(rec.model_id, rec.prompt_digest, rec.temperature, rec.sample_index),
                         BackendReply{rec.text, rec.usage});
    }
}

BackendReply ReplayBackend::call(const ModelRequest& req, int sample_index) {
    const auto key = cache_key(req.model_id, sha256_hex(req.prompt), req.temperature, sample_index);
    auto it = entries_.find(key);
    if (it == entries_.end()) {
        throw ReplayMiss("no recorded response for " + std::string(to_string(req.role)) + " request '" +
                         req.request_tag + "' sample " + std::to_string(sample_index));
    }
    return it->second;
}

}  // namespace privsim::llm
