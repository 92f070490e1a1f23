#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace privsim::llm {

enum class Role { generation, prediction, feedback };

std::string_view to_string(Role r);
Role role_from_string(std::string_view s);

struct ModelRequest {
    Role role = Role::prediction;
    std::string model_id;
    std::string prompt;
    double temperature = 0.0;
    std::optional<int> max_output;
    std::string request_tag;  // opaque, audit only; not part of the cache key
};

struct Usage {
    std::int64_t prompt_tokens = 0;
    std::int64_t output_tokens = 0;
};

/// What a backend hands back for one attempt.
struct BackendReply {
    std::string text;
    Usage usage;
};

/// A model endpoint. Implementations signal retryable trouble by throwing
/// TransientBackendError and anything else by PermanentBackendError.
/// Must be safe to call from several threads at once.
class Backend {
public:
    virtual ~Backend() = default;
    virtual BackendReply call(const ModelRequest& req, int sample_index) = 0;
    virtual std::string kind() const = 0;
};

}  // namespace privsim::llm
