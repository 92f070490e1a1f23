#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"

#include "privsim/llm/remote_backend.hpp"

#include <cstdlib>

#include <nlohmann/json.hpp>

#include "privsim/errors.hpp"

namespace privsim::llm {

using nlohmann::json;

RemoteBackend::RemoteBackend(RemoteConfig config) : config_(std::move(config)) {
    const auto& url = config_.base_url;
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("base_url needs a scheme: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    scheme_host_port_ = url.substr(0, path_start);
    path_prefix_ = path_start == std::string::npos ? "" : url.substr(path_start);
    while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
    if (!config_.auth_env.empty()) {
        if (const char* tok = std::getenv(config_.auth_env.c_str())) token_ = tok;
    }
}

BackendReply RemoteBackend::call(const ModelRequest& req, int sample_index) {
    (void)sample_index;  // distinguishes cache entries only; the provider samples on its own
    httplib::Client cli(scheme_host_port_);
    cli.set_connection_timeout(config_.timeout_seconds, 0);
    cli.set_read_timeout(config_.timeout_seconds, 0);
    httplib::Headers headers;
    if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);

    json body = {{"model", req.model_id},
                 {"temperature", req.temperature},
                 {"messages", json::array({{{"role", "user"}, {"content", req.prompt}}})}};
    if (req.max_output) body["max_tokens"] = *req.max_output;

    auto res = cli.Post(path_prefix_ + "/chat/completions", headers, body.dump(), "application/json");
    if (!res) throw TransientBackendError("transport error: " + httplib::to_string(res.error()));
    if (res->status == 429 || res->status >= 500) {
        throw TransientBackendError("HTTP " + std::to_string(res->status));
    }
    if (res->status != 200) {
        throw PermanentBackendError("HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
    }

    json doc;
    try {
        doc = json::parse(res->body);
    } catch (const json::parse_error& e) {
        throw TransientBackendError(std::string("malformed response body: ") + e.what());
    }
    BackendReply reply;
    try {
        const auto& msg = doc.at("choices").at(0).at("message");
        if (msg.contains("content") && msg.at("content").is_string()) reply.text = msg.at("content").get<std::string>();
    } catch (const json::exception& e) {
        throw PermanentBackendError(std::string("unexpected response shape: ") + e.what());
    }
    if (doc.contains("usage")) {
        const auto& u = doc.at("usage");
        reply.usage.prompt_tokens = u.value("prompt_tokens", std::int64_t{0});
        reply.usage.output_tokens = u.value("completion_tokens", std::int64_t{0});
    }
    return reply;
}

}  // namespace privsim::llm
