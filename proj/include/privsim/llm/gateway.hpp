#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "privsim/llm/backend.hpp"

namespace privsim::llm {

struct ModelResponse {
    std::string text;
    Usage usage;
    bool cached = false;
    std::int64_t latency_ms = 0;
    int retries = 0;
};

/// Token bucket. One instance is meant to be shared by every gateway that
/// talks to the same provider.
class RateLimiter {
public:
    RateLimiter(double per_second, double burst);
    void acquire();

    /// Shared limiter; the first caller's parameters win.
    static std::shared_ptr<RateLimiter> process_wide(double per_second, double burst);

private:
    std::mutex mu_;
    double per_second_;
    double burst_;
    double tokens_;
    std::chrono::steady_clock::time_point last_;
};

struct GatewayConfig {
    int retry_limit = 3;
    std::chrono::milliseconds backoff_initial{200};
    double backoff_multiplier = 2.0;
    int concurrency_cap = 4;
    double rate_limit_per_sec = 0.0;  // 0 disables
    double rate_limit_burst = 1.0;
    std::int64_t max_calls = 0;         // backend attempts; 0 = unlimited
    std::int64_t max_total_tokens = 0;  // 0 = unlimited
    bool cache_enabled = true;
    std::optional<std::filesystem::path> cache_dir;
};

/// One served (model, prompt, temperature, sample) tuple. The replay
/// backend is driven by a file of these.
struct CallRecord {
    Role role = Role::prediction;
    std::string model_id;
    double temperature = 0.0;
    int sample_index = 0;
    std::string prompt_digest;
    std::string prompt;
    std::string text;
    Usage usage;
    std::string request_tag;
};

nlohmann::json to_json(const CallRecord& r);
CallRecord call_record_from_json(const nlohmann::json& j);

std::string cache_key(const std::string& model_id, const std::string& prompt_digest, double temperature,
                      int sample_index);

struct RoleCounts {
    std::int64_t requests = 0;       // complete() invocations
    std::int64_t backend_calls = 0;  // attempts that reached the backend
    std::int64_t cache_hits = 0;
};

struct GatewayStats {
    std::map<Role, RoleCounts> by_role;
    std::int64_t retries = 0;
    std::int64_t prompt_tokens = 0;
    std::int64_t output_tokens = 0;
    int peak_in_flight = 0;

    std::int64_t backend_calls() const;
    std::int64_t requests(Role r) const;
};

/// Per-item outcome of complete_many.
struct BatchResult {
    std::optional<ModelResponse> response;
    std::string error_kind;
    std::string error_message;
    std::exception_ptr error;

    bool ok() const noexcept { return response.has_value(); }
};

/// Front door to a model backend: caching keyed by (model, prompt digest,
/// temperature, sample index), bounded retries with exponential backoff,
/// a shared rate limiter, a hard budget, and a cap on in-flight requests.
/// Thread-safe.
class Gateway {
public:
    Gateway(std::shared_ptr<Backend> backend, GatewayConfig config,
            std::shared_ptr<RateLimiter> limiter = nullptr);

    ModelResponse complete(const ModelRequest& req, int sample_index = 0);

    /// Positionally aligned with `reqs`; never throws for a single item.
    std::vector<BatchResult> complete_many(const std::vector<std::pair<ModelRequest, int>>& reqs);

    GatewayStats stats() const;
    const GatewayConfig& config() const noexcept { return config_; }
    const Backend& backend() const noexcept { return *backend_; }

    /// Every distinct request served so far (backend or cache), sorted by
    /// cache key so the log is independent of scheduling order.
    std::vector<CallRecord> call_log() const;

private:
    struct CacheEntry {
        std::string text;
        Usage usage;
    };

    void load_disk_cache();
    void persist(const std::string& key, const CallRecord& rec);
    void note_served(const std::string& key, const CallRecord& rec);
    void reserve_budget();

    std::shared_ptr<Backend> backend_;
    GatewayConfig config_;
    std::shared_ptr<RateLimiter> limiter_;
    std::counting_semaphore<> slots_;

    mutable std::mutex cache_mu_;
    std::map<std::string, CacheEntry> cache_;
    std::map<std::string, CallRecord> served_;

    mutable std::mutex stats_mu_;
    GatewayStats stats_;
    int in_flight_ = 0;
    std::atomic<std::int64_t> calls_reserved_{0};
    std::atomic<std::int64_t> tokens_used_{0};
};

/// Writes a call log as line-delimited JSON.
void write_call_log(const std::filesystem::path& path, const std::vector<CallRecord>& records);
std::vector<CallRecord> read_call_log(const std::filesystem::path& path);

}  // namespace privsim::llm
