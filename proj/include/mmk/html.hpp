#pragma once

#include <string>
#include <string_view>

#include "mmk/util.hpp"

namespace mmk {

// Visible-text extraction: drops tags plus script/style/head content, decodes
// the common entities and collapses whitespace. Block-level tags become
// newlines so paragraph structure survives.
inline std::string html_to_text(std::string_view html) {
    std::string out;
    out.reserve(html.size() / 2);
    size_t i = 0;

    auto skip_container = [&](std::string_view tag) {
        std::string close = "</" + std::string(tag);
        std::string lower = to_lower(html.substr(i));
        size_t end = lower.find(to_lower(close));
        i = end == std::string::npos ? html.size() : i + end;
    };

    while (i < html.size()) {
        char c = html[i];
        if (c == '<') {
            size_t close = html.find('>', i);
            if (close == std::string_view::npos) break;
            std::string tag = to_lower(trim(html.substr(i + 1, close - i - 1)));
            size_t name_end = tag.find_first_of(" \t/>");
            std::string name = name_end == std::string::npos ? tag : tag.substr(0, name_end);
            i = close + 1;
            if (name == "script" || name == "style" || name == "head" || name == "noscript") {
                skip_container(name);
                size_t container_close = html.find('>', i);
                i = container_close == std::string_view::npos ? html.size() : container_close + 1;
            } else if (name == "p" || name == "/p" || name == "br" || name == "br/" ||
                       name == "div" || name == "/div" || name == "li" || name == "/li" ||
                       name == "tr" || name == "/tr" || name == "h1" || name == "h2" ||
                       name == "h3" || name == "h4" || name == "/h1" || name == "/h2" ||
                       name == "/h3" || name == "/h4" || name == "table" || name == "/table" ||
                       name == "ul" || name == "/ul" || name == "ol" || name == "/ol") {
                out.push_back('\n');
            } else if (name == "td" || name == "/td" || name == "th" || name == "/th") {
                out.push_back(' ');
            }
        } else if (c == '&') {
            struct Entity { std::string_view name; char value; };
            static constexpr Entity entities[] = {
                {"&amp;", '&'}, {"&lt;", '<'}, {"&gt;", '>'},
                {"&quot;", '"'}, {"&#39;", '\''}, {"&apos;", '\''},
            };
            bool matched = false;
            for (const auto& e : entities) {
                if (html.substr(i, e.name.size()) == e.name) {
                    out.push_back(e.value);
                    i += e.name.size();
                    matched = true;
                    break;
                }
            }
            if (!matched) {
                if (html.substr(i, 6) == "&nbsp;") {
                    out.push_back(' ');
                    i += 6;
                } else {
                    out.push_back('&');
                    ++i;
                }
            }
        } else {
            out.push_back(c);
            ++i;
        }
    }

    // collapse runs of spaces and blank lines
    std::string collapsed;
    collapsed.reserve(out.size());
    int newlines = 0;
    bool space_pending = false;
    for (char c : out) {
        if (c == '\n') {
            ++newlines;
            space_pending = false;
            continue;
        }
        if (c == ' ' || c == '\t' || c == '\r') {
            space_pending = true;
            continue;
        }
        if (newlines > 0) {
            if (!collapsed.empty()) collapsed.append(newlines > 1 ? 2 : 1, '\n');
            newlines = 0;
            space_pending = false;
        } else if (space_pending) {
            if (!collapsed.empty() && collapsed.back() != '\n') collapsed.push_back(' ');
            space_pending = false;
        }
        collapsed.push_back(c);
    }
    return collapsed;
}

} // namespace mmk
