#pragma once

#include <string>

#include "privsim/llm/backend.hpp"

namespace privsim::llm {

struct RemoteConfig {
    /// e.g. "https://api.example.com/v1"; requests go to <base_url>/chat/completions
    std::string base_url;
    /// Name of the environment variable holding the bearer token. Empty or
    /// unset means no Authorization header.
    std::string auth_env;
    int timeout_seconds = 120;
};

/// Generic chat-completion HTTP client. Every prompt is sent as a single
/// user message. 429 and 5xx map to TransientBackendError, other 4xx to
/// PermanentBackendError.
class RemoteBackend : public Backend {
public:
    explicit RemoteBackend(RemoteConfig config);

    BackendReply call(const ModelRequest& req, int sample_index) override;
    std::string kind() const override { return "remote"; }

private:
    RemoteConfig config_;
    std::string scheme_host_port_;
    std::string path_prefix_;
    std::string token_;
};

}  // namespace privsim::llm
