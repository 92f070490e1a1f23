#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include <fmt/format.h>

#include "privsim/dataset.hpp"
#include "privsim/llm/gateway.hpp"
#include "privsim/llm/mock_backend.hpp"
#include "privsim/prediction.hpp"

namespace privsim::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                fmt::format("privsim-{}-{}-{}", tag, ::getpid(), counter++);
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const noexcept { return path_; }
    std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

private:
    std::filesystem::path path_;
};

inline std::string qid(int i) { return fmt::format("q{:02d}", i + 1); }

/// `n` Yes/No questions "[qNN] Do you share item NN?"; every respondent
/// answers Yes everywhere.
inline SurveyDataset yes_dataset(int n, int respondents = 1) {
    std::vector<QuestionSpec> qs;
    for (int i = 0; i < n; ++i) {
        qs.push_back({qid(i), fmt::format("[{}] Do you share item {}?", qid(i), i + 1), {"Yes", "No"},
                      i % 2 ? Domain::behavioral : Domain::attitude, {}});
    }
    std::vector<ResponseSet> rs;
    for (int j = 0; j < respondents; ++j) {
        ResponseSet r{fmt::format("r{}", j + 1), {}};
        for (int i = 0; i < n; ++i) r.answers[qid(i)] = "Yes";
        rs.push_back(std::move(r));
    }
    return SurveyDataset("yes", std::nullopt, std::move(qs), std::move(rs));
}

inline std::vector<std::string> ids(int n) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) out.push_back(qid(i));
    return out;
}

/// Column index of the question a prediction prompt asks about.
inline int asked_question(const std::string& prompt) {
    const auto pos = prompt.rfind("[q");
    if (pos == std::string::npos) return -1;
    return std::stoi(prompt.substr(pos + 2, 2)) - 1;
}

/// Persona texts of the form "correct=<k>" make the prediction mock answer
/// Yes on the first k questions and No afterwards. "abstain=<k>" answers
/// garbage on the first k questions and Yes on the rest.
inline std::string persona_marker(int correct) { return fmt::format("correct={}", correct); }

inline std::string accuracy_reply(const llm::ModelRequest& req) {
    const int q = asked_question(req.prompt);
    if (auto p = req.prompt.find("abstain="); p != std::string::npos) {
        return q < std::stoi(req.prompt.substr(p + 8)) ? "maybe?" : "Yes";
    }
    const auto p = req.prompt.find("correct=");
    if (p == std::string::npos) return "No";
    return q < std::stoi(req.prompt.substr(p + 8)) ? "Yes" : "No";
}

/// Generation replies come from `candidates` indexed by sample index, i.e.
/// (iteration - 1) * B + b.
inline std::shared_ptr<llm::ScriptedMock> accuracy_mock(std::vector<std::string> candidates,
                                                        std::string feedback = "tighten it") {
    auto mock = std::make_shared<llm::ScriptedMock>();
    llm::MockRule gen;
    gen.role = llm::Role::generation;
    gen.responses = std::move(candidates);
    gen.mode = llm::MockRule::ListMode::by_sample_index;
    mock->on(std::move(gen));
    mock->on_role(llm::Role::feedback, [feedback](const llm::ModelRequest&, int) { return feedback; });
    mock->on_role(llm::Role::prediction, [](const llm::ModelRequest& req, int) { return accuracy_reply(req); });
    return mock;
}

inline llm::GatewayConfig quiet_gateway(int cap = 4) {
    llm::GatewayConfig c;
    c.retry_limit = 2;
    c.backoff_initial = std::chrono::milliseconds(0);
    c.concurrency_cap = cap;
    return c;
}

}  // namespace privsim::testing
