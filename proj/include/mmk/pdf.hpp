#pragma once

#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mmk/archive.hpp" // inflate_auto for FlateDecode streams
#include "mmk/errors.hpp"
#include "mmk/util.hpp"

namespace mmk {

// Text extraction for straightforward text-based PDFs: walks the page tree,
// decodes Flate/plain content streams and collects Tj/TJ/'/" show operators.
// Scanned or exotically encoded documents are out of scope for this reader.
namespace pdf {

struct Object {
    std::string body;   // dictionary + anything before the stream
    std::string stream; // raw stream bytes (may be empty)
};

namespace detail {

inline std::map<int, Object> scan_objects(const std::string& raw) {
    std::map<int, Object> objects;
    size_t pos = 0;
    while (true) {
        size_t obj_kw = raw.find(" obj", pos);
        if (obj_kw == std::string::npos) break;
        // read back "<num> <gen> obj"
        size_t line_start = raw.rfind('\n', obj_kw);
        if (line_start == std::string::npos) line_start = 0;
        std::istringstream head(raw.substr(line_start, obj_kw - line_start));
        int num = -1, gen = 0;
        head >> num >> gen;
        size_t end_kw = raw.find("endobj", obj_kw);
        if (end_kw == std::string::npos)
            throw Error(Errc::malformed_pdf, "object without endobj");
        if (num >= 0) {
            std::string body = raw.substr(obj_kw + 4, end_kw - obj_kw - 4);
            Object obj;
            size_t stream_kw = body.find("stream");
            if (stream_kw != std::string::npos) {
                size_t data_start = stream_kw + 6;
                if (data_start < body.size() && body[data_start] == '\r') ++data_start;
                if (data_start < body.size() && body[data_start] == '\n') ++data_start;
                size_t stream_end = body.rfind("endstream");
                if (stream_end == std::string::npos || stream_end < data_start)
                    throw Error(Errc::malformed_pdf, "stream without endstream");
                obj.body = body.substr(0, stream_kw);
                obj.stream = body.substr(data_start, stream_end - data_start);
                // strip the trailing EOL that precedes "endstream"
                while (!obj.stream.empty() &&
                       (obj.stream.back() == '\n' || obj.stream.back() == '\r'))
                    obj.stream.pop_back();
            } else {
                obj.body = body;
            }
            objects[num] = std::move(obj);
        }
        pos = end_kw + 6;
    }
    if (objects.empty()) throw Error(Errc::malformed_pdf, "no objects found");
    return objects;
}

inline std::optional<int> find_ref(const std::string& body, const std::string& key) {
    size_t kpos = body.find(key);
    if (kpos == std::string::npos) return std::nullopt;
    std::istringstream is(body.substr(kpos + key.size()));
    int num = -1;
    is >> num;
    if (num < 0) return std::nullopt;
    return num;
}

inline std::vector<int> find_ref_array(const std::string& body, const std::string& key) {
    std::vector<int> refs;
    size_t kpos = body.find(key);
    if (kpos == std::string::npos) return refs;
    size_t open = body.find('[', kpos);
    size_t single = body.find_first_of("0123456789", kpos + key.size());
    if (open == std::string::npos || (single != std::string::npos && single < open)) {
        // single reference form: "/Contents 5 0 R"
        if (auto ref = find_ref(body, key)) refs.push_back(*ref);
        return refs;
    }
    size_t close = body.find(']', open);
    if (close == std::string::npos) return refs;
    std::istringstream is(body.substr(open + 1, close - open - 1));
    while (is) {
        int num = -1, gen = 0;
        std::string r;
        if (is >> num >> gen >> r && r == "R") refs.push_back(num);
    }
    return refs;
}

// Depth-first page tree walk; leaves come out in document order.
inline void collect_pages(const std::map<int, Object>& objects, int node,
                          std::vector<int>& pages, int depth = 0) {
    if (depth > 64) throw Error(Errc::malformed_pdf, "page tree too deep");
    auto it = objects.find(node);
    if (it == objects.end()) return;
    const std::string& body = it->second.body;
    if (body.find("/Type /Pages") != std::string::npos ||
        body.find("/Type/Pages") != std::string::npos) {
        for (int kid : find_ref_array(body, "/Kids"))
            collect_pages(objects, kid, pages, depth + 1);
    } else if (body.find("/Type /Page") != std::string::npos ||
               body.find("/Type/Page") != std::string::npos) {
        pages.push_back(node);
    }
}

inline std::string decode_stream(const Object& obj, uint64_t cap) {
    if (obj.body.find("/FlateDecode") != std::string::npos)
        return mmk::detail::inflate_auto(obj.stream, cap);
    if (obj.body.find("/Filter") != std::string::npos)
        throw Error(Errc::malformed_pdf, "unsupported stream filter");
    return obj.stream;
}

inline std::string decode_pdf_string(const std::string& s) {
    std::string out;
    for (size_t i = 0; i < s.size(); ++i) {
        char c = s[i];
        if (c != '\\') {
            out.push_back(c);
            continue;
        }
        if (++i >= s.size()) break;
        char esc = s[i];
        switch (esc) {
            case 'n': out.push_back('\n'); break;
            case 'r': out.push_back('\r'); break;
            case 't': out.push_back('\t'); break;
            case 'b': out.push_back('\b'); break;
            case 'f': out.push_back('\f'); break;
            case '(': case ')': case '\\': out.push_back(esc); break;
            default:
                if (esc >= '0' && esc <= '7') {
                    int val = esc - '0';
                    for (int k = 0; k < 2 && i + 1 < s.size() && s[i + 1] >= '0' && s[i + 1] <= '7';
                         ++k)
                        val = val * 8 + (s[++i] - '0');
                    out.push_back(static_cast<char>(val));
                } else {
                    out.push_back(esc);
                }
        }
    }
    return out;
}

// Pulls text out of the content-stream show operators.
inline std::string extract_text_ops(const std::string& content) {
    std::string out;
    size_t i = 0;
    auto read_literal = [&](size_t start) -> std::pair<std::string, size_t> {
        std::string lit;
        int depth = 1;
        size_t j = start + 1;
        for (; j < content.size(); ++j) {
            char c = content[j];
            if (c == '\\' && j + 1 < content.size()) {
                lit.push_back(c);
                lit.push_back(content[++j]);
                continue;
            }
            if (c == '(') ++depth;
            else if (c == ')' && --depth == 0) break;
            lit.push_back(c);
        }
        return {decode_pdf_string(lit), j + 1};
    };

    std::vector<std::string> pending; // strings seen since the last operator
    while (i < content.size()) {
        char c = content[i];
        if (c == '(') {
            auto [text, next] = read_literal(i);
            pending.push_back(text);
            i = next;
        } else if (c == '<' && i + 1 < content.size() && content[i + 1] != '<') {
            size_t close = content.find('>', i);
            if (close == std::string::npos) break;
            std::string hex = content.substr(i + 1, close - i - 1);
            std::string text;
            for (size_t h = 0; h + 1 < hex.size(); h += 2) {
                auto nib = [](char x) -> int {
                    if (x >= '0' && x <= '9') return x - '0';
                    if (x >= 'a' && x <= 'f') return x - 'a' + 10;
                    if (x >= 'A' && x <= 'F') return x - 'A' + 10;
                    return 0;
                };
                text.push_back(static_cast<char>(nib(hex[h]) * 16 + nib(hex[h + 1])));
            }
            pending.push_back(text);
            i = close + 1;
        } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '\'' || c == '"') {
            size_t op_end = i;
            while (op_end < content.size() &&
                   !std::isspace(static_cast<unsigned char>(content[op_end])) &&
                   content[op_end] != '(' && content[op_end] != '[' && content[op_end] != '<')
                ++op_end;
            std::string op = content.substr(i, op_end - i);
            if (op == "Tj" || op == "TJ" || op == "'" || op == "\"") {
                for (auto& s : pending) out += s;
                pending.clear();
            } else if (op == "Td" || op == "TD" || op == "Tm" || op == "T*" || op == "ET") {
                pending.clear();
                if (!out.empty() && out.back() != '\n') out.push_back('\n');
            } else {
                pending.clear();
            }
            i = op_end == i ? i + 1 : op_end;
        } else {
            ++i;
        }
    }
    return out;
}

} // namespace detail

struct PageRange {
    int first = 1; // 1-based, inclusive
    int last = -1; // -1 = to end
};

inline int page_count(const std::string& raw) {
    auto objects = detail::scan_objects(raw);
    std::vector<int> pages;
    for (const auto& [num, obj] : objects) {
        if (obj.body.find("/Type /Catalog") != std::string::npos ||
            obj.body.find("/Type/Catalog") != std::string::npos) {
            if (auto root = detail::find_ref(obj.body, "/Pages")) {
                detail::collect_pages(objects, *root, pages);
                break;
            }
        }
    }
    return static_cast<int>(pages.size());
}

inline std::string extract_text(const std::string& raw, PageRange range = {},
                                uint64_t cap = 64ull * 1024 * 1024) {
    if (raw.rfind("%PDF-", 0) != 0) throw Error(Errc::malformed_pdf, "missing %PDF header");
    auto objects = detail::scan_objects(raw);

    std::vector<int> pages;
    for (const auto& [num, obj] : objects) {
        if (obj.body.find("/Type /Catalog") != std::string::npos ||
            obj.body.find("/Type/Catalog") != std::string::npos) {
            if (auto root = detail::find_ref(obj.body, "/Pages"))
                detail::collect_pages(objects, *root, pages);
            break;
        }
    }
    if (pages.empty())
        for (const auto& [num, obj] : objects)
            detail::collect_pages(objects, num, pages); // fallback: any page objects

    if (pages.empty()) throw Error(Errc::malformed_pdf, "no pages found");

    int total = static_cast<int>(pages.size());
    int first = range.first;
    int last = range.last < 0 ? total : range.last;
    if (first < 1 || first > total || last > total || last < first)
        throw Error(Errc::page_out_of_range,
                    "requested pages " + std::to_string(first) + ".." + std::to_string(last) +
                        " of " + std::to_string(total));

    std::ostringstream out;
    for (int p = first; p <= last; ++p) {
        const Object& page = objects.at(pages[static_cast<size_t>(p - 1)]);
        out << "--- page " << p << " ---\n";
        for (int content_ref : detail::find_ref_array(page.body, "/Contents")) {
            auto it = objects.find(content_ref);
            if (it == objects.end()) continue;
            out << detail::extract_text_ops(detail::decode_stream(it->second, cap));
        }
        if (p != last) out << '\n';
    }
    return out.str();
}

} // namespace pdf

} // namespace mmk
