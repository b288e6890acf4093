#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <system_error>

#include "mmk/errors.hpp"

namespace mmk {

namespace fs = std::filesystem;

// Resolves `rel` against `root` and guarantees the result stays inside root.
// Rejects absolute inputs, `..` escapes and symlinks that point outside.
// `root` must already be canonical (see Workspace).
inline fs::path confine(const fs::path& root, std::string_view rel) {
    fs::path p{std::string(rel)};
    if (p.is_absolute())
        throw Error(Errc::path_escape, "absolute path not allowed: " + std::string(rel));

    fs::path combined = (root / p).lexically_normal();
    // weakly_canonical resolves symlinks on the existing prefix, which is what
    // catches links pointing out of the tree.
    std::error_code ec;
    fs::path resolved = fs::weakly_canonical(combined, ec);
    if (ec) resolved = combined;

    auto starts_with = [](const fs::path& child, const fs::path& base) {
        auto ci = child.begin();
        for (auto bi = base.begin(); bi != base.end(); ++bi, ++ci) {
            if (bi->empty()) continue; // trailing slash artifact
            if (ci == child.end() || *ci != *bi) return false;
        }
        return true;
    };
    if (!starts_with(resolved, root))
        throw Error(Errc::path_escape, "path escapes workspace: " + std::string(rel));
    return resolved;
}

inline bool is_under(const fs::path& p, const fs::path& base) {
    auto pi = p.begin();
    for (auto bi = base.begin(); bi != base.end(); ++bi, ++pi) {
        if (bi->empty()) continue;
        if (pi == p.end() || *pi != *bi) return false;
    }
    return true;
}

} // namespace mmk
