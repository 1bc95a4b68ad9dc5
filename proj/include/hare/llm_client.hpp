#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "hare/text.hpp"

namespace hare {

enum class Decoding { greedy };
enum class FinishReason { stop, length, error };

inline const char* to_string(FinishReason f) {
    switch (f) {
        case FinishReason::stop: return "stop";
        case FinishReason::length: return "length";
        case FinishReason::error: return "error";
    }
    return "error";
}

inline FinishReason parse_finish_reason(std::string_view s) {
    if (s == "stop") return FinishReason::stop;
    if (s == "length") return FinishReason::length;
    return FinishReason::error;
}

/// Separator between an answer and the next story pair; keeps a model from inventing a new demonstration.
inline const std::string kDefaultStop = "\n\nStory A:";

struct CompletionRequest {
    std::string prompt;
    int max_new_tokens = 128;
    Decoding decoding = Decoding::greedy;
    std::vector<std::string> stop_sequences{kDefaultStop};
    std::string backend_id;
};

struct CompletionResult {
    std::string text;
    FinishReason finish_reason = FinishReason::stop;
    double latency_ms = 0;
    bool cached = false;
};

/// Content hash of everything that can change a greedy generation.
inline std::string request_hash(const CompletionRequest& r) {
    const nlohmann::json j{{"prompt", r.prompt},
                           {"max_new_tokens", r.max_new_tokens},
                           {"decoding", "greedy"},
                           {"stop", r.stop_sequences},
                           {"backend", r.backend_id}};
    return text::sha256_hex(j.dump());
}

inline std::string prompt_hash(std::string_view prompt) { return text::sha256_hex(prompt); }

/// Cut at the earliest occurrence of any stop sequence.
inline std::optional<std::string> truncate_at_stop(std::string_view s, const std::vector<std::string>& stops) {
    std::size_t cut = std::string_view::npos;
    for (const auto& stop : stops) {
        if (stop.empty()) continue;
        cut = std::min(cut, s.find(stop));
    }
    if (cut == std::string_view::npos) return std::nullopt;
    return std::string(s.substr(0, cut));
}

// ---------------------------------------------------------------------------------------------
// Errors

class LlmError : public std::runtime_error {
  public:
    LlmError(const std::string& what, bool retryable) : std::runtime_error(what), retryable_(retryable) {}
    bool retryable() const { return retryable_; }
    virtual const char* kind() const { return "BackendError"; }

  private:
    bool retryable_;
};

class BackendUnreachable : public LlmError {
  public:
    explicit BackendUnreachable(const std::string& what) : LlmError(what, true) {}
    const char* kind() const override { return "BackendUnreachable"; }
};

class RateLimited : public LlmError {
  public:
    explicit RateLimited(const std::string& what) : LlmError(what, true) {}
    const char* kind() const override { return "RateLimited"; }
};

class ContextOverflow : public LlmError {
  public:
    ContextOverflow(std::size_t estimate, std::size_t budget)
        : LlmError("prompt is ~" + std::to_string(estimate) + " tokens, budget " + std::to_string(budget), false),
          token_estimate(estimate) {}
    const char* kind() const override { return "ContextOverflow"; }
    std::size_t token_estimate;
};

class ReplayMiss : public LlmError {
  public:
    explicit ReplayMiss(const std::string& hash) : LlmError("no replay entry for prompt " + hash, false) {}
    const char* kind() const override { return "ReplayMiss"; }
};

class NetworkDisabled : public LlmError {
  public:
    NetworkDisabled() : LlmError("cache miss with network disabled", false) {}
    const char* kind() const override { return "NetworkDisabled"; }
};

// ---------------------------------------------------------------------------------------------
// Backends

class Backend {
  public:
    virtual ~Backend() = default;
    virtual std::string id() const = 0;
    virtual bool needs_network() const = 0;
    virtual CompletionResult generate(const CompletionRequest& req) = 0;
};

/// Resolves prompts from a sha256(prompt) -> response map. Never touches the network.
class ReplayBackend : public Backend {
  public:
    explicit ReplayBackend(std::map<std::string, std::string> responses) : responses_(std::move(responses)) {}

    std::string id() const override { return "replay"; }
    bool needs_network() const override { return false; }

    CompletionResult generate(const CompletionRequest& req) override {
        const auto h = prompt_hash(req.prompt);
        const auto it = responses_.find(h);
        if (it == responses_.end()) throw ReplayMiss(h);
        return {it->second, FinishReason::stop, 0, false};
    }

    std::size_t size() const { return responses_.size(); }

  private:
    std::map<std::string, std::string> responses_;
};

inline std::shared_ptr<ReplayBackend> replay_seed(std::map<std::string, std::string> responses) {
    return std::make_shared<ReplayBackend>(std::move(responses));
}

inline constexpr int kReplaySchemaVersion = 1;

inline std::map<std::string, std::string> load_replay_map(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open replay map " + path.string());
    const auto j = nlohmann::json::parse(in);
    if (j.value("schema_version", 0) != kReplaySchemaVersion) throw std::runtime_error("replay map: unsupported schema_version");
    return j.at("responses").get<std::map<std::string, std::string>>();
}

inline void save_replay_map(const std::filesystem::path& path, const std::map<std::string, std::string>& m) {
    std::ofstream out(path, std::ios::binary);
    out << nlohmann::json{{"schema_version", kReplaySchemaVersion}, {"responses", m}}.dump(1) << "\n";
}

struct HttpBackendConfig {
    std::string base_url = "http://127.0.0.1:8000";  // scheme://host:port
    std::string path = "/v1/completions";
    std::string model;
    std::string api_key_env = "HARE_API_KEY";
    int timeout_s = 120;
};

/// OpenAI-style /v1/completions adapter. Greedy decoding is sent as temperature 0, top_p 1.
class HttpBackend : public Backend {
  public:
    explicit HttpBackend(HttpBackendConfig cfg) : cfg_(std::move(cfg)) {}

    std::string id() const override { return "http:" + cfg_.base_url + cfg_.path + "#" + cfg_.model; }
    bool needs_network() const override { return true; }

    static nlohmann::json request_body(const CompletionRequest& req, const std::string& model) {
        nlohmann::json body{{"model", model},
                            {"prompt", req.prompt},
                            {"max_tokens", req.max_new_tokens},
                            {"temperature", 0},
                            {"top_p", 1},
                            {"n", 1}};
        if (!req.stop_sequences.empty()) body["stop"] = req.stop_sequences;
        return body;
    }

    CompletionResult generate(const CompletionRequest& req) override {
        httplib::Client cli(cfg_.base_url);
        cli.set_connection_timeout(cfg_.timeout_s);
        cli.set_read_timeout(cfg_.timeout_s);
        httplib::Headers headers;
        if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key) {
            headers.emplace("Authorization", std::string("Bearer ") + key);
        }
        const auto res = cli.Post(cfg_.path, headers, request_body(req, cfg_.model).dump(), "application/json");
        if (!res) throw BackendUnreachable(cfg_.base_url + ": " + httplib::to_string(res.error()));
        if (res->status == 429) throw RateLimited(cfg_.base_url + ": HTTP 429");
        if (res->status >= 500) throw BackendUnreachable(cfg_.base_url + ": HTTP " + std::to_string(res->status));
        if (res->status != 200) throw LlmError(cfg_.base_url + ": HTTP " + std::to_string(res->status) + " " + res->body, false);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(res->body);
            const auto& choice = j.at("choices").at(0);
            const auto reason = choice.contains("finish_reason") && choice["finish_reason"].is_string()
                                    ? choice["finish_reason"].get<std::string>()
                                    : std::string("stop");
            return {choice.at("text").get<std::string>(), parse_finish_reason(reason), 0, false};
        } catch (const nlohmann::json::exception& e) {
            throw LlmError(cfg_.base_url + ": malformed completion body: " + e.what(), false);
        }
    }

  private:
    HttpBackendConfig cfg_;
};

// ---------------------------------------------------------------------------------------------
// Cache

/// In-memory cache, optionally mirrored to one file per request hash:
/// a "key: value" header, a blank line, then the response bytes verbatim.
class ResponseCache {
  public:
    explicit ResponseCache(std::optional<std::filesystem::path> dir = std::nullopt) : dir_(std::move(dir)) {
        if (dir_) std::filesystem::create_directories(*dir_);
    }

    struct Entry {
        std::string text;
        FinishReason finish_reason = FinishReason::stop;
    };

    std::optional<Entry> get(const std::string& hash) {
        std::lock_guard lock(mu_);
        if (auto it = mem_.find(hash); it != mem_.end()) return it->second;
        if (!dir_) return std::nullopt;
        std::ifstream in(file_for(hash), std::ios::binary);
        if (!in) return std::nullopt;
        std::stringstream ss;
        ss << in.rdbuf();
        auto parsed = parse_file(ss.str());
        if (parsed) mem_.emplace(hash, *parsed);
        return parsed;
    }

    void put(const std::string& hash, const Entry& e, const CompletionRequest& req) {
        std::lock_guard lock(mu_);
        mem_[hash] = e;
        if (!dir_) return;
        const auto final_path = file_for(hash);
        auto tmp = final_path;
        tmp += ".tmp." + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            out << "hare-cache: 1\n"
                << "backend: " << req.backend_id << "\n"
                << "prompt-sha256: " << prompt_hash(req.prompt) << "\n"
                << "max-new-tokens: " << req.max_new_tokens << "\n"
                << "finish-reason: " << to_string(e.finish_reason) << "\n\n"
                << e.text;
        }
        std::filesystem::rename(tmp, final_path);
    }

    static std::optional<Entry> parse_file(const std::string& raw) {
        const auto sep = raw.find("\n\n");
        if (sep == std::string::npos || !text::starts_with(raw, "hare-cache: 1\n")) return std::nullopt;
        Entry e;
        e.text = raw.substr(sep + 2);
        for (const auto& line : text::lines(raw.substr(0, sep))) {
            if (text::starts_with(line, "finish-reason: ")) e.finish_reason = parse_finish_reason(line.substr(15));
        }
        return e;
    }

    const std::optional<std::filesystem::path>& dir() const { return dir_; }

  private:
    std::filesystem::path file_for(const std::string& hash) const { return *dir_ / (hash + ".txt"); }

    std::optional<std::filesystem::path> dir_;
    std::mutex mu_;
    std::unordered_map<std::string, Entry> mem_;
};

// ---------------------------------------------------------------------------------------------
// Client

struct ClientOptions {
    std::optional<std::filesystem::path> cache_dir;
    std::optional<std::size_t> context_budget;  // estimated prompt tokens
    std::size_t max_concurrency = 4;
    bool no_network = false;
    int max_retries = 4;
    int base_backoff_ms = 100;
    int max_backoff_ms = 5000;
};

/// Shareable across worker threads. Byte-identical requests reach the backend at most once.
class CompletionClient {
  public:
    CompletionClient(std::shared_ptr<Backend> backend, ClientOptions opts = {})
        : backend_(std::move(backend)), opts_(std::move(opts)), cache_(opts_.cache_dir) {
        if (opts_.max_concurrency == 0) opts_.max_concurrency = 1;
    }

    const Backend& backend() const { return *backend_; }
    std::string backend_id() const { return backend_->id(); }

    CompletionResult complete(CompletionRequest req) {
        if (req.backend_id.empty()) req.backend_id = backend_->id();
        const auto key = request_hash(req);
        if (auto hit = cache_.get(key)) return {hit->text, hit->finish_reason, 0, true};

        std::shared_future<CompletionResult> fut;
        std::promise<CompletionResult> promise;
        bool owner = false;
        {
            std::lock_guard lock(mu_);
            if (auto it = in_flight_.find(key); it != in_flight_.end()) {
                fut = it->second;
            } else {
                fut = promise.get_future().share();
                in_flight_.emplace(key, fut);
                owner = true;
            }
        }
        if (!owner) {
            auto r = fut.get();
            r.cached = true;
            return r;
        }
        try {
            auto r = dispatch(req);
            cache_.put(key, {r.text, r.finish_reason}, req);
            promise.set_value(r);
        } catch (...) {
            promise.set_exception(std::current_exception());
        }
        {
            std::lock_guard lock(mu_);
            in_flight_.erase(key);
        }
        return fut.get();
    }

    std::size_t backend_calls() const { return backend_calls_.load(); }
    std::size_t peak_in_flight() const { return peak_in_flight_.load(); }

  private:
    CompletionResult dispatch(const CompletionRequest& req) {
        if (opts_.context_budget) {
            const auto est = text::estimate_tokens(req.prompt);
            if (est > *opts_.context_budget) throw ContextOverflow(est, *opts_.context_budget);
        }
        if (opts_.no_network && backend_->needs_network()) throw NetworkDisabled();

        int backoff = opts_.base_backoff_ms;
        for (int attempt = 0;; ++attempt) {
            try {
                Slot slot(*this);
                const auto start = std::chrono::steady_clock::now();
                ++backend_calls_;
                auto r = backend_->generate(req);
                r.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
                if (auto cut = truncate_at_stop(r.text, req.stop_sequences)) {
                    r.text = std::move(*cut);
                    r.finish_reason = FinishReason::stop;
                }
                r.cached = false;
                return r;
            } catch (const LlmError& e) {
                if (!e.retryable() || attempt >= opts_.max_retries) throw;
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
            backoff = std::min(backoff * 2, opts_.max_backoff_ms);
        }
    }

    // Caps concurrent backend calls at max_concurrency.
    struct Slot {
        explicit Slot(CompletionClient& c) : c_(c) {
            std::unique_lock lock(c_.slot_mu_);
            c_.slot_cv_.wait(lock, [&] { return c_.active_ < c_.opts_.max_concurrency; });
            ++c_.active_;
            c_.peak_in_flight_ = std::max(c_.peak_in_flight_.load(), c_.active_);
        }
        ~Slot() {
            {
                std::lock_guard lock(c_.slot_mu_);
                --c_.active_;
            }
            c_.slot_cv_.notify_one();
        }
        CompletionClient& c_;
    };

    std::shared_ptr<Backend> backend_;
    ClientOptions opts_;
    ResponseCache cache_;
    std::mutex mu_;
    std::unordered_map<std::string, std::shared_future<CompletionResult>> in_flight_;
    std::mutex slot_mu_;
    std::condition_variable slot_cv_;
    std::size_t active_ = 0;
    std::atomic<std::size_t> backend_calls_{0};
    std::atomic<std::size_t> peak_in_flight_{0};
};

}  // namespace hare
