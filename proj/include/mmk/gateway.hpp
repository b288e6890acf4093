#pragma once

#include <chrono>
#include <deque>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "mmk/errors.hpp"
#include "mmk/util.hpp"

namespace mmk {

// ---------------------------------------------------------------------------
// requests
// ---------------------------------------------------------------------------

enum class ChatRole { user, assistant };

struct ChatMessage {
    ChatRole role = ChatRole::user;
    std::string text;
};

struct ChatParams {
    double temperature = 0.7;
    int max_tokens = 4096;
    std::string model_name = "default";
};

struct ChatRequest {
    std::string system;
    std::vector<ChatMessage> messages;
    ChatParams params;

    static ChatRequest simple(std::string system_prompt, std::string user_text,
                              ChatParams params = {}) {
        ChatRequest req;
        req.system = std::move(system_prompt);
        req.messages.push_back({ChatRole::user, std::move(user_text)});
        req.params = std::move(params);
        return req;
    }
};

// Canonical serialization: compact JSON with lexicographically sorted keys.
// Message bodies are preserved byte for byte; only the envelope is normalized.
inline std::string canonical_request(const ChatRequest& req) {
    json messages = json::array();
    for (const auto& m : req.messages) {
        messages.push_back({{"role", m.role == ChatRole::user ? "user" : "assistant"},
                            {"text", m.text}});
    }
    json j = {
        {"messages", messages},
        {"params",
         {{"max_tokens", req.params.max_tokens},
          {"model", req.params.model_name},
          {"temperature", req.params.temperature}}},
        {"system", req.system},
    };
    return j.dump();
}

// Stable across runs and platforms; sensitive to system, messages and params.
inline std::string request_digest(const ChatRequest& req) {
    return content_hash(canonical_request(req));
}

// ---------------------------------------------------------------------------
// transcript
// ---------------------------------------------------------------------------

enum class TranscriptMode { record, replay };

struct TranscriptEntry {
    std::string digest;
    std::string response;
    bool truncated = false;
};

// Newline-delimited JSON records. First line is a header; each following line
// holds {"digest","response","truncated"}.
class Transcript {
public:
    Transcript() = default;

    static Transcript load(const fs::path& path) {
        Transcript t;
        std::string raw = read_file(path);
        auto lines = split_lines(raw);
        if (lines.empty() || lines[0].find("mmk-transcript") == std::string::npos)
            throw Error(Errc::corrupt_archive, "bad transcript header in " + path.string());
        for (size_t i = 1; i < lines.size(); ++i) {
            if (trim(lines[i]).empty()) continue;
            json j = json::parse(lines[i], nullptr, false);
            if (j.is_discarded() || !j.contains("digest") || !j.contains("response"))
                throw Error(Errc::corrupt_archive, "bad transcript record at line " + std::to_string(i + 1));
            TranscriptEntry e;
            e.digest = j["digest"].get<std::string>();
            e.response = j["response"].get<std::string>();
            e.truncated = j.value("truncated", false);
            t.entries_.push_back(std::move(e));
        }
        t.rebuild_index();
        return t;
    }

    void save(const fs::path& path) const {
        std::ostringstream os;
        os << R"({"format":"mmk-transcript","version":1})" << '\n';
        for (const auto& e : entries_) {
            json j = {{"digest", e.digest}, {"response", e.response}, {"truncated", e.truncated}};
            os << j.dump() << '\n';
        }
        write_file(path, os.str());
    }

    void append(TranscriptEntry entry) {
        pending_[entry.digest].push_back(entries_.size());
        entries_.push_back(std::move(entry));
    }

    // Replay lookup: consumes the oldest unconsumed entry for this digest.
    std::optional<TranscriptEntry> consume(const std::string& digest) {
        auto it = pending_.find(digest);
        if (it == pending_.end() || it->second.empty()) return std::nullopt;
        size_t idx = it->second.front();
        it->second.pop_front();
        return entries_[idx];
    }

    const std::vector<TranscriptEntry>& entries() const { return entries_; }
    size_t size() const { return entries_.size(); }

private:
    void rebuild_index() {
        pending_.clear();
        for (size_t i = 0; i < entries_.size(); ++i)
            pending_[entries_[i].digest].push_back(i);
    }

    std::vector<TranscriptEntry> entries_;
    std::map<std::string, std::deque<size_t>> pending_;
};

// ---------------------------------------------------------------------------
// backends
// ---------------------------------------------------------------------------

struct Completion {
    std::string text;
    bool truncated = false;
};

class GatewayBackend {
public:
    virtual ~GatewayBackend() = default;
    virtual Completion complete(const ChatRequest& request) = 0;
};

// ---------------------------------------------------------------------------
// gateway
// ---------------------------------------------------------------------------

struct GatewayConfig {
    int max_retries = 3;                       // live provider retries
    std::chrono::milliseconds backoff{250};    // doubled per retry
    uint64_t call_budget = 0;                  // 0 = unlimited
    bool sleep_on_retry = true;
};

// Single entry point for every model call. Three operating modes:
//   live    — backend only
//   record  — backend + transcript append
//   replay  — transcript lookup, no backend, fully offline
class LlmGateway {
public:
    static LlmGateway live(std::shared_ptr<GatewayBackend> backend, GatewayConfig cfg = {}) {
        LlmGateway gw(std::move(cfg));
        gw.backend_ = std::move(backend);
        return gw;
    }

    static LlmGateway recording(std::shared_ptr<GatewayBackend> backend, GatewayConfig cfg = {}) {
        LlmGateway gw(std::move(cfg));
        gw.backend_ = std::move(backend);
        gw.transcript_ = std::make_unique<Transcript>();
        gw.mode_ = TranscriptMode::record;
        return gw;
    }

    static LlmGateway replaying(Transcript transcript, GatewayConfig cfg = {}) {
        LlmGateway gw(std::move(cfg));
        gw.transcript_ = std::make_unique<Transcript>(std::move(transcript));
        gw.mode_ = TranscriptMode::replay;
        return gw;
    }

    Completion complete_detailed(const ChatRequest& request) {
        std::lock_guard<std::mutex> lock(*mutex_);
        if (config_.call_budget && calls_ >= config_.call_budget)
            throw Error(Errc::budget_exceeded,
                        "gateway call budget of " + std::to_string(config_.call_budget) + " reached");
        ++calls_;
        const std::string digest = request_digest(request);

        if (mode_ == TranscriptMode::replay) {
            auto entry = transcript_->consume(digest);
            if (!entry)
                throw Error(Errc::replay_miss, "no stored response for digest " + digest);
            ++consumed_;
            return {entry->response, entry->truncated};
        }

        Completion result = call_backend(request);
        if (mode_ == TranscriptMode::record) {
            transcript_->append({digest, result.text, result.truncated});
            if (!record_path_.empty()) transcript_->save(record_path_);
        }
        return result;
    }

    std::string complete(const ChatRequest& request) { return complete_detailed(request).text; }

    // When set, the transcript file is rewritten after every recorded call so
    // an aborted run still leaves a usable prefix on disk.
    void set_record_path(fs::path path) { record_path_ = std::move(path); }

    uint64_t calls() const { return calls_; }
    uint64_t entries_consumed() const { return consumed_; }
    std::optional<TranscriptMode> mode() const { return mode_; }
    const Transcript* transcript() const { return transcript_.get(); }

private:
    explicit LlmGateway(GatewayConfig cfg) : config_(std::move(cfg)) {}

    Completion call_backend(const ChatRequest& request) {
        if (!backend_) throw Error(Errc::invalid_config, "no gateway backend configured");
        std::string last_error;
        auto backoff = config_.backoff;
        for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
            if (attempt > 0 && config_.sleep_on_retry) {
                std::this_thread::sleep_for(backoff);
                backoff *= 2;
            }
            try {
                return backend_->complete(request);
            } catch (const Error& e) {
                if (e.code() != Errc::provider_error) throw;
                last_error = e.what();
            }
        }
        throw Error(Errc::provider_error,
                    "provider failed after " + std::to_string(config_.max_retries + 1) +
                        " attempts: " + last_error);
    }

    GatewayConfig config_;
    std::shared_ptr<GatewayBackend> backend_;
    std::unique_ptr<Transcript> transcript_;
    std::optional<TranscriptMode> mode_;
    fs::path record_path_;
    uint64_t calls_ = 0;
    uint64_t consumed_ = 0;
    std::unique_ptr<std::mutex> mutex_ = std::make_unique<std::mutex>();
};

} // namespace mmk
