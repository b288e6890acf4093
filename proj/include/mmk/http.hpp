#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>

#include <httplib.h>

#include "mmk/errors.hpp"
#include "mmk/util.hpp"

namespace mmk {

struct HttpResponse {
    int status = 0;
    std::string content_type;
    std::string body;
};

// Injectable HTTP layer so every web tool can run against a local fixture
// server in tests.
class HttpClient {
public:
    virtual ~HttpClient() = default;
    virtual HttpResponse get(const std::string& url) = 0;
    // Streams the body through `sink`; throws SizeCapExceeded past `max_bytes`.
    virtual HttpResponse download(const std::string& url,
                                  const std::function<void(const char*, size_t)>& sink,
                                  uint64_t max_bytes) = 0;
};

struct ParsedUrl {
    std::string scheme;
    std::string host_port; // "host" or "host:port"
    std::string path;      // includes query
};

inline ParsedUrl parse_url(const std::string& url) {
    ParsedUrl out;
    size_t scheme_end = url.find("://");
    if (scheme_end == std::string::npos)
        throw Error(Errc::http_error, "unsupported url: " + url);
    out.scheme = url.substr(0, scheme_end);
    size_t host_start = scheme_end + 3;
    size_t path_start = url.find('/', host_start);
    if (path_start == std::string::npos) {
        out.host_port = url.substr(host_start);
        out.path = "/";
    } else {
        out.host_port = url.substr(host_start, path_start - host_start);
        out.path = url.substr(path_start);
    }
    if (out.host_port.empty()) throw Error(Errc::http_error, "empty host in url: " + url);
    return out;
}

class HttplibClient : public HttpClient {
public:
    HttpResponse get(const std::string& url) override {
        auto parsed = parse_url(url);
        httplib::Client client(client_base(parsed));
        client.set_follow_location(true);
        auto res = client.Get(parsed.path);
        if (!res) throw Error(Errc::http_error, "request failed: " + url);
        HttpResponse out;
        out.status = res->status;
        out.content_type = res->get_header_value("Content-Type");
        out.body = res->body;
        return out;
    }

    HttpResponse download(const std::string& url,
                          const std::function<void(const char*, size_t)>& sink,
                          uint64_t max_bytes) override {
        auto parsed = parse_url(url);
        httplib::Client client(client_base(parsed));
        client.set_follow_location(true);
        uint64_t received = 0;
        HttpResponse out;
        auto res = client.Get(
            parsed.path,
            [&](const httplib::Response& response) {
                out.status = response.status;
                out.content_type = response.get_header_value("Content-Type");
                return true;
            },
            [&](const char* data, size_t len) {
                received += len;
                if (max_bytes && received > max_bytes) return false;
                sink(data, len);
                return true;
            });
        if (max_bytes && received > max_bytes)
            throw Error(Errc::size_cap_exceeded,
                        "download exceeds cap of " + std::to_string(max_bytes) + " bytes: " + url);
        if (!res) throw Error(Errc::http_error, "request failed: " + url);
        return out;
    }

private:
    static std::string client_base(const ParsedUrl& parsed) {
        return parsed.scheme + "://" + parsed.host_port;
    }
};

} // namespace mmk
