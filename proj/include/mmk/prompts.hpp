#pragma once

#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>

#include "mmk/errors.hpp"
#include "mmk/util.hpp"

namespace mmk {

// Versioned prompt templates live as files in one directory; placeholders are
// written {{name}}. Keeping them on disk keeps every instruction auditable
// and diffable instead of buried in string literals.
class PromptLibrary {
public:
    explicit PromptLibrary(fs::path dir) : dir_(std::move(dir)) {
        if (!fs::is_directory(dir_))
            throw Error(Errc::invalid_config, "prompt directory not found: " + dir_.string());
    }

    static fs::path default_dir() {
        if (const char* env = std::getenv("MMK_PROMPTS_DIR")) return env;
#ifdef MMK_DEFAULT_PROMPTS_DIR
        return MMK_DEFAULT_PROMPTS_DIR;
#else
        return "prompts";
#endif
    }

    const std::string& raw(const std::string& name) const {
        auto it = cache_.find(name);
        if (it != cache_.end()) return it->second;
        fs::path file = dir_ / (name + ".txt");
        if (!fs::is_regular_file(file))
            throw Error(Errc::invalid_config, "prompt template missing: " + file.string());
        auto [pos, _] = cache_.emplace(name, read_file(file));
        return pos->second;
    }

    std::string render(const std::string& name,
                       const std::map<std::string, std::string>& values = {}) const {
        std::string text = raw(name);
        std::string out;
        out.reserve(text.size());
        size_t pos = 0;
        while (pos < text.size()) {
            size_t open = text.find("{{", pos);
            if (open == std::string::npos) {
                out.append(text, pos, std::string::npos);
                break;
            }
            size_t close = text.find("}}", open + 2);
            if (close == std::string::npos) {
                out.append(text, pos, std::string::npos);
                break;
            }
            out.append(text, pos, open - pos);
            std::string key = trim(text.substr(open + 2, close - open - 2));
            auto it = values.find(key);
            if (it == values.end())
                throw Error(Errc::invalid_config,
                            "prompt '" + name + "' placeholder '" + key + "' has no value");
            out += it->second;
            pos = close + 2;
        }
        return out;
    }

    const fs::path& dir() const { return dir_; }

private:
    fs::path dir_;
    mutable std::map<std::string, std::string> cache_;
};

} // namespace mmk
