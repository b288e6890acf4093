#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mmk/errors.hpp"

namespace mmk {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// strings
// ---------------------------------------------------------------------------

inline std::string trim(std::string_view s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

inline std::string to_lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

inline std::vector<std::string> split_lines(std::string_view text) {
    std::vector<std::string> lines;
    size_t pos = 0;
    while (pos <= text.size()) {
        size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) {
            lines.emplace_back(text.substr(pos));
            break;
        }
        std::string line(text.substr(pos, nl - pos));
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(std::move(line));
        pos = nl + 1;
    }
    return lines;
}

inline bool icontains(std::string_view haystack, std::string_view needle) {
    return to_lower(haystack).find(to_lower(needle)) != std::string::npos;
}

// Lowercase identifier made of [a-z0-9_]; used for variable directories and
// rubric/score key matching.
inline std::string slugify(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    bool last_sep = true;
    for (char ch : s) {
        unsigned char c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            out.push_back(static_cast<char>(std::tolower(c)));
            last_sep = false;
        } else if (!last_sep) {
            out.push_back('_');
            last_sep = true;
        }
    }
    while (!out.empty() && out.back() == '_') out.pop_back();
    return out;
}

inline std::optional<long> parse_long(std::string_view s) {
    std::string t = trim(s);
    if (t.empty()) return std::nullopt;
    long value = 0;
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
    if (ec != std::errc() || ptr != t.data() + t.size()) return std::nullopt;
    return value;
}

// ---------------------------------------------------------------------------
// hashing (content keys for transcripts and trajectory digests)
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(std::string_view data, uint64_t basis = 14695981039346656037ULL) {
    uint64_t h = basis;
    for (unsigned char c : data) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return out;
}

// 128-bit content hash rendered as 32 hex chars. Two independent FNV-1a
// passes; stable across platforms and runs.
inline std::string content_hash(std::string_view data) {
    return hex64(fnv1a64(data)) + hex64(fnv1a64(data, 0x9ae16a3b2f90404fULL));
}

// ---------------------------------------------------------------------------
// files
// ---------------------------------------------------------------------------

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::io_error, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& path, std::string_view content, bool append = false) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, append ? std::ios::binary | std::ios::app : std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::io_error, "cannot write " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw Error(Errc::io_error, "short write to " + path.string());
}

// ---------------------------------------------------------------------------
// model-output JSON extraction: fenced block first, then first balanced object
// ---------------------------------------------------------------------------

inline std::optional<std::string> first_balanced_object(std::string_view text) {
    size_t start = text.find('{');
    while (start != std::string_view::npos) {
        int depth = 0;
        bool in_string = false;
        bool escaped = false;
        for (size_t i = start; i < text.size(); ++i) {
            char c = text[i];
            if (in_string) {
                if (escaped) escaped = false;
                else if (c == '\\') escaped = true;
                else if (c == '"') in_string = false;
                continue;
            }
            if (c == '"') in_string = true;
            else if (c == '{') ++depth;
            else if (c == '}') {
                if (--depth == 0) return std::string(text.substr(start, i - start + 1));
            }
        }
        start = text.find('{', start + 1);
    }
    return std::nullopt;
}

inline std::optional<json> extract_json_object(std::string_view text) {
    // ```json fenced block wins if present and parseable
    size_t fence = text.find("```");
    while (fence != std::string_view::npos) {
        size_t body_start = text.find('\n', fence);
        if (body_start == std::string_view::npos) break;
        size_t fence_end = text.find("```", body_start);
        if (fence_end == std::string_view::npos) break;
        std::string_view body = text.substr(body_start + 1, fence_end - body_start - 1);
        if (auto obj = first_balanced_object(body)) {
            json parsed = json::parse(*obj, nullptr, false);
            if (!parsed.is_discarded()) return parsed;
        }
        fence = text.find("```", fence_end + 3);
    }
    if (auto obj = first_balanced_object(text)) {
        json parsed = json::parse(*obj, nullptr, false);
        if (!parsed.is_discarded()) return parsed;
    }
    return std::nullopt;
}

// Case-insensitive markdown heading presence ("## Assumptions" matches
// "assumptions"). Accepts any heading level and surrounding decoration.
inline bool has_heading(std::string_view markdown, std::string_view heading) {
    for (const auto& line : split_lines(markdown)) {
        std::string t = trim(line);
        if (t.empty() || t[0] != '#') continue;
        size_t level = t.find_first_not_of('#');
        if (level == std::string::npos) continue;
        std::string title = to_lower(trim(t.substr(level)));
        // strip markdown bold/emphasis around the title
        while (!title.empty() && (title.front() == '*' || title.front() == '_')) title.erase(title.begin());
        while (!title.empty() && (title.back() == '*' || title.back() == '_' || title.back() == ':')) title.pop_back();
        if (title.find(to_lower(heading)) != std::string::npos) return true;
    }
    return false;
}

} // namespace mmk
