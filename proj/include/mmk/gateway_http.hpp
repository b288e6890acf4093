#pragma once

#include <cstdlib>
#include <memory>
#include <string>

#include <httplib.h>

#include "mmk/gateway.hpp"

namespace mmk {

struct ProviderConfig {
    std::string base_url;   // e.g. http://localhost:8000
    std::string api_key;
    std::string path = "/v1/chat/completions";

    static ProviderConfig from_env() {
        ProviderConfig cfg;
        if (const char* base = std::getenv("MMK_API_BASE")) cfg.base_url = base;
        if (const char* key = std::getenv("MMK_API_KEY")) cfg.api_key = key;
        return cfg;
    }
};

// Live provider speaking the de-facto chat-completions REST shape. Everything
// provider-specific stays behind this class.
class HttpChatBackend : public GatewayBackend {
public:
    explicit HttpChatBackend(ProviderConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.base_url.empty())
            throw Error(Errc::invalid_config, "provider base url not set (MMK_API_BASE)");
    }

    Completion complete(const ChatRequest& request) override {
        json messages = json::array();
        if (!request.system.empty())
            messages.push_back({{"role", "system"}, {"content", request.system}});
        for (const auto& m : request.messages)
            messages.push_back({{"role", m.role == ChatRole::user ? "user" : "assistant"},
                                {"content", m.text}});
        json body = {
            {"model", request.params.model_name},
            {"messages", messages},
            {"temperature", request.params.temperature},
            {"max_tokens", request.params.max_tokens},
        };

        httplib::Client client(cfg_.base_url);
        client.set_read_timeout(120, 0);
        httplib::Headers headers;
        if (!cfg_.api_key.empty())
            headers.emplace("Authorization", "Bearer " + cfg_.api_key);
        auto res = client.Post(cfg_.path, headers, body.dump(), "application/json");
        if (!res)
            throw Error(Errc::provider_error, "transport failure talking to " + cfg_.base_url);
        if (res->status < 200 || res->status >= 300)
            throw Error(Errc::provider_error,
                        "provider returned HTTP " + std::to_string(res->status));

        json parsed = json::parse(res->body, nullptr, false);
        if (parsed.is_discarded() || !parsed.contains("choices") || parsed["choices"].empty())
            throw Error(Errc::provider_error, "malformed provider response");
        const json& choice = parsed["choices"][0];
        Completion out;
        if (choice.contains("message"))
            out.text = choice["message"].value("content", "");
        else
            out.text = choice.value("text", "");
        out.truncated = choice.value("finish_reason", "stop") == "length";
        return out;
    }

private:
    ProviderConfig cfg_;
};

} // namespace mmk
