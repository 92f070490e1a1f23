#include "privsim/llm/gateway.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <thread>

#include "privsim/digest.hpp"
#include "privsim/errors.hpp"

namespace privsim::llm {

using nlohmann::json;

std::string_view to_string(Role r) {
    switch (r) {
        case Role::generation: return "generation";
        case Role::prediction: return "prediction";
        case Role::feedback: return "feedback";
    }
    return "prediction";
}

Role role_from_string(std::string_view s) {
    if (s == "generation") return Role::generation;
    if (s == "prediction") return Role::prediction;
    if (s == "feedback") return Role::feedback;
    throw ConfigError("unknown role '" + std::string(s) + "'");
}

RateLimiter::RateLimiter(double per_second, double burst)
    : per_second_(per_second), burst_(std::max(1.0, burst)), tokens_(burst_), last_(std::chrono::steady_clock::now()) {}

void RateLimiter::acquire() {
    if (per_second_ <= 0.0) return;
    std::unique_lock lock(mu_);
    for (;;) {
        const auto now = std::chrono::steady_clock::now();
        const double elapsed = std::chrono::duration<double>(now - last_).count();
        tokens_ = std::min(burst_, tokens_ + elapsed * per_second_);
        last_ = now;
        if (tokens_ >= 1.0) {
            tokens_ -= 1.0;
            return;
        }
        const double wait_s = (1.0 - tokens_) / per_second_;
        lock.unlock();
        std::this_thread::sleep_for(std::chrono::duration<double>(wait_s));
        lock.lock();
    }
}

std::shared_ptr<RateLimiter> RateLimiter::process_wide(double per_second, double burst) {
    static std::mutex mu;
    static std::shared_ptr<RateLimiter> instance;
    std::lock_guard lock(mu);
    if (!instance) instance = std::make_shared<RateLimiter>(per_second, burst);
    return instance;
}

std::string cache_key(const std::string& model_id, const std::string& prompt_digest, double temperature,
                      int sample_index) {
    char temp[64];
    std::snprintf(temp, sizeof temp, "%.17g", temperature);
    return model_id + '\x1f' + prompt_digest + '\x1f' + temp + '\x1f' + std::to_string(sample_index);
}

json to_json(const CallRecord& r) {
    return {{"role", std::string(to_string(r.role))},
            {"model_id", r.model_id},
            {"temperature", r.temperature},
            {"sample_index", r.sample_index},
            {"prompt_digest", r.prompt_digest},
            {"prompt", r.prompt},
            {"text", r.text},
            {"prompt_tokens", r.usage.prompt_tokens},
            {"output_tokens", r.usage.output_tokens},
            {"request_tag", r.request_tag}};
}

CallRecord call_record_from_json(const json& j) {
    CallRecord r;
    r.role = role_from_string(j.at("role").get<std::string>());
    r.model_id = j.at("model_id").get<std::string>();
    r.temperature = j.at("temperature").get<double>();
    r.sample_index = j.at("sample_index").get<int>();
    r.prompt_digest = j.at("prompt_digest").get<std::string>();
    r.prompt = j.value("prompt", std::string{});
    r.text = j.at("text").get<std::string>();
    r.usage.prompt_tokens = j.value("prompt_tokens", std::int64_t{0});
    r.usage.output_tokens = j.value("output_tokens", std::int64_t{0});
    r.request_tag = j.value("request_tag", std::string{});
    return r;
}

std::int64_t GatewayStats::backend_calls() const {
    std::int64_t n = 0;
    for (const auto& [_, c] : by_role) n += c.backend_calls;
    return n;
}

std::int64_t GatewayStats::requests(Role r) const {
    auto it = by_role.find(r);
    return it == by_role.end() ? 0 : it->second.requests;
}

Gateway::Gateway(std::shared_ptr<Backend> backend, GatewayConfig config, std::shared_ptr<RateLimiter> limiter)
    : backend_(std::move(backend)),
      config_(std::move(config)),
      limiter_(std::move(limiter)),
      slots_(std::max(1, config_.concurrency_cap)) {
    if (!backend_) throw ConfigError("gateway needs a backend");
    if (config_.concurrency_cap < 1) config_.concurrency_cap = 1;
    if (!limiter_ && config_.rate_limit_per_sec > 0.0) {
        limiter_ = RateLimiter::process_wide(config_.rate_limit_per_sec, config_.rate_limit_burst);
    }
    if (config_.cache_enabled && config_.cache_dir) load_disk_cache();
}

void Gateway::load_disk_cache() {
    const auto file = *config_.cache_dir / "cache.jsonl";
    std::ifstream in(file);
    if (!in) return;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error&) {
            continue;  // torn write from an aborted run
        }
        const auto rec = call_record_from_json(j);
        const auto key = cache_key(rec.model_id, rec.prompt_digest, rec.temperature, rec.sample_index);
        cache_.emplace(key, CacheEntry{rec.text, rec.usage});
    }
}

void Gateway::persist(const std::string& key, const CallRecord& rec) {
    (void)key;
    if (!config_.cache_dir) return;
    std::filesystem::create_directories(*config_.cache_dir);
    std::ofstream out(*config_.cache_dir / "cache.jsonl", std::ios::app);
    out << to_json(rec).dump() << '\n';
    out.flush();
}

void Gateway::note_served(const std::string& key, const CallRecord& rec) {
    // cache_mu_ held by caller. Identical keys may arrive with different
    // tags; keep the smallest so the log does not depend on scheduling.
    auto [it, inserted] = served_.emplace(key, rec);
    if (!inserted && rec.request_tag < it->second.request_tag) it->second.request_tag = rec.request_tag;
}

void Gateway::reserve_budget() {
    if (config_.max_total_tokens > 0 && tokens_used_.load() >= config_.max_total_tokens) {
        throw BudgetExceeded("token ceiling of " + std::to_string(config_.max_total_tokens) + " reached");
    }
    if (config_.max_calls > 0) {
        const auto n = calls_reserved_.fetch_add(1) + 1;
        if (n > config_.max_calls) {
            calls_reserved_.fetch_sub(1);
            throw BudgetExceeded("call ceiling of " + std::to_string(config_.max_calls) + " reached");
        }
    }
}

ModelResponse Gateway::complete(const ModelRequest& req, int sample_index) {
    if (req.prompt.empty()) throw InvalidRequest("empty prompt");
    if (!(req.temperature >= 0.0)) throw InvalidRequest("temperature must be non-negative");

    CallRecord rec;
    rec.role = req.role;
    rec.model_id = req.model_id;
    rec.temperature = req.temperature;
    rec.sample_index = sample_index;
    rec.prompt_digest = sha256_hex(req.prompt);
    rec.prompt = req.prompt;
    rec.request_tag = req.request_tag;
    const auto key = cache_key(req.model_id, rec.prompt_digest, req.temperature, sample_index);

    {
        std::lock_guard lock(stats_mu_);
        ++stats_.by_role[req.role].requests;
    }

    if (config_.cache_enabled) {
        std::unique_lock lock(cache_mu_);
        auto it = cache_.find(key);
        if (it != cache_.end()) {
            ModelResponse resp{it->second.text, it->second.usage, true, 0, 0};
            rec.text = resp.text;
            rec.usage = resp.usage;
            note_served(key, rec);
            lock.unlock();
            std::lock_guard slock(stats_mu_);
            ++stats_.by_role[req.role].cache_hits;
            return resp;
        }
    }

    slots_.acquire();
    struct SlotGuard {
        Gateway* gw;
        ~SlotGuard() {
            {
                std::lock_guard lock(gw->stats_mu_);
                --gw->in_flight_;
            }
            gw->slots_.release();
        }
    } guard{this};
    {
        std::lock_guard lock(stats_mu_);
        ++in_flight_;
        stats_.peak_in_flight = std::max(stats_.peak_in_flight, in_flight_);
    }

    const auto start = std::chrono::steady_clock::now();
    auto backoff = config_.backoff_initial;
    int retries = 0;
    BackendReply reply;
    for (;;) {
        reserve_budget();
        if (limiter_) limiter_->acquire();
        {
            std::lock_guard lock(stats_mu_);
            ++stats_.by_role[req.role].backend_calls;
        }
        try {
            reply = backend_->call(req, sample_index);
            break;
        } catch (const TransientBackendError& e) {
            if (retries >= config_.retry_limit) {
                throw BackendUnavailable("retries exhausted after " + std::to_string(retries) +
                                         " attempts: " + e.what());
            }
            ++retries;
            {
                std::lock_guard lock(stats_mu_);
                ++stats_.retries;
            }
            if (backoff.count() > 0) std::this_thread::sleep_for(backoff);
            backoff = std::chrono::milliseconds(
                static_cast<std::int64_t>(static_cast<double>(backoff.count()) * config_.backoff_multiplier));
        }
    }
    const auto latency = std::chrono::duration_cast<std::chrono::milliseconds>(
        std::chrono::steady_clock::now() - start);

    tokens_used_.fetch_add(reply.usage.prompt_tokens + reply.usage.output_tokens);
    {
        std::lock_guard lock(stats_mu_);
        stats_.prompt_tokens += reply.usage.prompt_tokens;
        stats_.output_tokens += reply.usage.output_tokens;
    }
    if (reply.text.empty()) throw EmptyCompletion("backend returned no text for " + req.request_tag);

    rec.text = reply.text;
    rec.usage = reply.usage;
    {
        std::lock_guard lock(cache_mu_);
        if (config_.cache_enabled) {
            auto [it, inserted] = cache_.emplace(key, CacheEntry{reply.text, reply.usage});
            if (inserted) persist(key, rec);
        }
        note_served(key, rec);
    }
    return ModelResponse{reply.text, reply.usage, false, latency.count(), retries};
}

std::vector<BatchResult> Gateway::complete_many(const std::vector<std::pair<ModelRequest, int>>& reqs) {
    std::vector<BatchResult> out(reqs.size());
    if (reqs.empty()) return out;
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const auto i = next.fetch_add(1);
            if (i >= reqs.size()) return;
            try {
                out[i].response = complete(reqs[i].first, reqs[i].second);
            } catch (const Error& e) {
                out[i].error_kind = e.kind();
                out[i].error_message = e.what();
                out[i].error = std::current_exception();
            } catch (const std::exception& e) {
                out[i].error_kind = "Error";
                out[i].error_message = e.what();
                out[i].error = std::current_exception();
            }
        }
    };
    const auto n_workers = std::min<std::size_t>(reqs.size(), static_cast<std::size_t>(config_.concurrency_cap));
    if (n_workers <= 1) {
        worker();
        return out;
    }
    {
        std::vector<std::jthread> pool;
        pool.reserve(n_workers);
        for (std::size_t t = 0; t < n_workers; ++t) pool.emplace_back(worker);
    }
    return out;
}

GatewayStats Gateway::stats() const {
    std::lock_guard lock(stats_mu_);
    return stats_;
}

std::vector<CallRecord> Gateway::call_log() const {
    std::lock_guard lock(cache_mu_);
    std::vector<CallRecord> out;
    out.reserve(served_.size());
    for (const auto& [_, rec] : served_) out.push_back(rec);
    return out;
}

void write_call_log(const std::filesystem::path& path, const std::vector<CallRecord>& records) {
    std::string body;
    for (const auto& r : records) body += to_json(r).dump() + '\n';
    write_file(path, body);
}

std::vector<CallRecord> read_call_log(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open call log " + path.string());
    std::vector<CallRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) out.push_back(call_record_from_json(json::parse(line)));
    }
    return out;
}

}  // namespace privsim::llm
