#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mmk/errors.hpp"
#include "mmk/fsx.hpp"
#include "mmk/gateway.hpp"
#include "mmk/prompts.hpp"
#include "mmk/util.hpp"

namespace mmk {

// ---------------------------------------------------------------------------
// domain types
// ---------------------------------------------------------------------------

enum class Contest { mcm, icm, himcm, midmcm, im2c };
enum class Difficulty { easy, medium, hard };
enum class AttachmentKind { data, image, pdf };

inline std::string_view contest_name(Contest c) {
    switch (c) {
        case Contest::mcm: return "MCM";
        case Contest::icm: return "ICM";
        case Contest::himcm: return "HiMCM";
        case Contest::midmcm: return "MidMCM";
        case Contest::im2c: return "IM2C";
    }
    return "?";
}

inline std::optional<Contest> contest_from_name(std::string_view s) {
    std::string u = to_lower(s);
    if (u == "mcm") return Contest::mcm;
    if (u == "icm") return Contest::icm;
    if (u == "himcm") return Contest::himcm;
    if (u == "midmcm") return Contest::midmcm;
    if (u == "im2c") return Contest::im2c;
    return std::nullopt;
}

inline std::string_view difficulty_name(Difficulty d) {
    switch (d) {
        case Difficulty::easy: return "Easy";
        case Difficulty::medium: return "Medium";
        case Difficulty::hard: return "Hard";
    }
    return "?";
}

inline std::optional<Difficulty> difficulty_from_name(std::string_view s) {
    std::string u = to_lower(s);
    if (u == "easy") return Difficulty::easy;
    if (u == "medium") return Difficulty::medium;
    if (u == "hard") return Difficulty::hard;
    return std::nullopt;
}

inline std::string_view attachment_kind_name(AttachmentKind k) {
    switch (k) {
        case AttachmentKind::data: return "data";
        case AttachmentKind::image: return "image";
        case AttachmentKind::pdf: return "pdf";
    }
    return "?";
}

inline std::optional<AttachmentKind> attachment_kind_from_name(std::string_view s) {
    std::string u = to_lower(s);
    if (u == "data") return AttachmentKind::data;
    if (u == "image") return AttachmentKind::image;
    if (u == "pdf") return AttachmentKind::pdf;
    return std::nullopt;
}

struct AttachmentRef {
    std::string path; // relative to the bundle directory
    AttachmentKind kind = AttachmentKind::data;
};

struct Problem {
    std::string id;
    std::string title;
    std::string statement;
    Contest source_contest = Contest::mcm;
    int year = 0;
    std::vector<std::string> subtasks;
    std::vector<AttachmentRef> attachments;
    Difficulty difficulty = Difficulty::medium;
    std::vector<std::string> domain_tags;
    fs::path bundle_dir; // where it was loaded from
};

enum class Rating { a, b, c };

inline char rating_letter(Rating r) {
    switch (r) {
        case Rating::a: return 'A';
        case Rating::b: return 'B';
        case Rating::c: return 'C';
    }
    return '?';
}

struct CategoryRating {
    Rating data_accessibility = Rating::a;
    Rating modeling_difficulty = Rating::a;
    Rating image_clarity = Rating::a;
};

// ---------------------------------------------------------------------------
// difficulty heuristic: three A ratings -> easy; exactly one below A ->
// medium; everything else -> hard.
// ---------------------------------------------------------------------------

inline Difficulty classify_difficulty(const CategoryRating& rating) {
    int below_a = 0;
    if (rating.data_accessibility != Rating::a) ++below_a;
    if (rating.modeling_difficulty != Rating::a) ++below_a;
    if (rating.image_clarity != Rating::a) ++below_a;
    if (below_a == 0) return Difficulty::easy;
    if (below_a == 1) return Difficulty::medium;
    return Difficulty::hard;
}

// ---------------------------------------------------------------------------
// bundle manifest: plain "key: value" lines, repeated keys for lists.
//   id: ...            title: ...          contest: MCM|ICM|HiMCM|MidMCM|IM2C
//   year: 2022         difficulty: Easy|Medium|Hard
//   tag: <text>        subtask: <text>
//   attachment: <kind> <relative path>
// Statement text lives in statement.md next to the manifest.
// ---------------------------------------------------------------------------

inline constexpr const char* kManifestName = "manifest.txt";
inline constexpr const char* kStatementName = "statement.md";

namespace detail {

struct ManifestLine {
    std::string key;
    std::string value;
};

inline std::vector<ManifestLine> parse_manifest_lines(const std::string& text) {
    std::vector<ManifestLine> out;
    for (const auto& raw : split_lines(text)) {
        std::string line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        size_t colon = line.find(':');
        if (colon == std::string::npos)
            throw Error(Errc::schema_violation, "manifest line without ':': " + line);
        out.push_back({to_lower(trim(line.substr(0, colon))), trim(line.substr(colon + 1))});
    }
    return out;
}

} // namespace detail

inline Problem load_problem(const fs::path& bundle_dir) {
    fs::path manifest_path = bundle_dir / kManifestName;
    if (!fs::is_regular_file(manifest_path))
        throw Error(Errc::missing_manifest, manifest_path.string());

    Problem p;
    p.bundle_dir = fs::absolute(bundle_dir);

    bool have_id = false, have_title = false, have_contest = false, have_year = false,
         have_difficulty = false;
    for (const auto& [key, value] : detail::parse_manifest_lines(read_file(manifest_path))) {
        if (key == "id") {
            p.id = value;
            have_id = true;
        } else if (key == "title") {
            p.title = value;
            have_title = true;
        } else if (key == "contest") {
            auto c = contest_from_name(value);
            if (!c) throw Error(Errc::schema_violation, "unknown contest: " + value);
            p.source_contest = *c;
            have_contest = true;
        } else if (key == "year") {
            auto y = parse_long(value);
            if (!y || *y < 1900 || *y > 2100)
                throw Error(Errc::schema_violation, "bad year: " + value);
            p.year = static_cast<int>(*y);
            have_year = true;
        } else if (key == "difficulty") {
            auto d = difficulty_from_name(value);
            if (!d) throw Error(Errc::schema_violation, "unknown difficulty: " + value);
            p.difficulty = *d;
            have_difficulty = true;
        } else if (key == "tag") {
            p.domain_tags.push_back(value);
        } else if (key == "subtask") {
            p.subtasks.push_back(value);
        } else if (key == "attachment") {
            size_t space = value.find(' ');
            if (space == std::string::npos)
                throw Error(Errc::schema_violation, "attachment needs '<kind> <path>': " + value);
            auto kind = attachment_kind_from_name(value.substr(0, space));
            if (!kind)
                throw Error(Errc::schema_violation, "unknown attachment kind: " + value);
            p.attachments.push_back({trim(value.substr(space + 1)), *kind});
        } else {
            throw Error(Errc::schema_violation, "unknown manifest key: " + key);
        }
    }

    if (!have_id || p.id.empty()) throw Error(Errc::schema_violation, "manifest missing id");
    if (!have_title) throw Error(Errc::schema_violation, "manifest missing title");
    if (!have_contest) throw Error(Errc::schema_violation, "manifest missing contest");
    if (!have_year) throw Error(Errc::schema_violation, "manifest missing year");
    if (!have_difficulty) throw Error(Errc::schema_violation, "manifest missing difficulty");

    fs::path statement_path = bundle_dir / kStatementName;
    if (!fs::is_regular_file(statement_path))
        throw Error(Errc::schema_violation, "bundle has no statement.md");
    p.statement = read_file(statement_path);
    if (trim(p.statement).empty())
        throw Error(Errc::schema_violation, "statement is empty");

    fs::path root = fs::weakly_canonical(p.bundle_dir);
    for (const auto& att : p.attachments) {
        fs::path resolved;
        try {
            resolved = confine(root, att.path);
        } catch (const Error&) {
            throw Error(Errc::schema_violation,
                        "attachment escapes bundle: " + att.path);
        }
        if (!fs::is_regular_file(resolved))
            throw Error(Errc::dangling_attachment, att.path);
    }
    return p;
}

inline void serialize_problem(const Problem& p, const fs::path& bundle_dir) {
    std::ostringstream m;
    m << "id: " << p.id << '\n';
    m << "title: " << p.title << '\n';
    m << "contest: " << contest_name(p.source_contest) << '\n';
    m << "year: " << p.year << '\n';
    m << "difficulty: " << difficulty_name(p.difficulty) << '\n';
    for (const auto& t : p.domain_tags) m << "tag: " << t << '\n';
    for (const auto& s : p.subtasks) m << "subtask: " << s << '\n';
    for (const auto& a : p.attachments)
        m << "attachment: " << attachment_kind_name(a.kind) << ' ' << a.path << '\n';
    write_file(bundle_dir / kManifestName, m.str());
    write_file(bundle_dir / kStatementName, p.statement);
}

// Optional pre-captioned description stored next to an image attachment.
inline std::optional<std::string> attachment_caption(const Problem& p, const AttachmentRef& att) {
    fs::path caption = p.bundle_dir / (att.path + ".caption.txt");
    if (fs::is_regular_file(caption)) return read_file(caption);
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// model-driven categorization
// ---------------------------------------------------------------------------

// Lenient extraction: the first three standalone A/B/C tokens in reading
// order. Model answers wrap the choices in prose more often than not.
inline CategoryRating parse_category_rating(std::string_view response) {
    std::vector<Rating> found;
    for (size_t i = 0; i < response.size() && found.size() < 3; ++i) {
        char c = response[i];
        if (c != 'A' && c != 'B' && c != 'C') continue;
        bool left_ok = (i == 0) || !std::isalnum(static_cast<unsigned char>(response[i - 1]));
        bool right_ok =
            (i + 1 == response.size()) || !std::isalnum(static_cast<unsigned char>(response[i + 1]));
        if (!left_ok || !right_ok) continue;
        found.push_back(c == 'A' ? Rating::a : c == 'B' ? Rating::b : Rating::c);
    }
    if (found.size() < 3)
        throw Error(Errc::unparseable_rating,
                    "expected three A/B/C choices, found " + std::to_string(found.size()));
    return {found[0], found[1], found[2]};
}

inline std::string describe_attachments(const Problem& p) {
    if (p.attachments.empty()) return "(no attachments)";
    std::ostringstream os;
    for (const auto& att : p.attachments) {
        os << "- [" << attachment_kind_name(att.kind) << "] " << att.path;
        if (att.kind == AttachmentKind::image) {
            if (auto caption = attachment_caption(p, att))
                os << "\n  caption: " << trim(*caption);
        }
        os << '\n';
    }
    return os.str();
}

inline CategoryRating categorize_problem(const Problem& problem, LlmGateway& gateway,
                                         const PromptLibrary& prompts,
                                         const ChatParams& params = {}) {
    std::ostringstream user;
    user << "Problem title: " << problem.title << "\n\n";
    user << problem.statement << "\n\n";
    user << "Attachments:\n" << describe_attachments(problem) << '\n';
    ChatRequest req = ChatRequest::simple(prompts.render("categorize_difficulty"), user.str(), params);
    std::string response;
    try {
        response = gateway.complete(req);
    } catch (const Error& e) {
        if (e.code() == Errc::replay_miss || e.code() == Errc::provider_error ||
            e.code() == Errc::budget_exceeded)
            throw Error(Errc::gateway_error, e.what());
        throw;
    }
    return parse_category_rating(response);
}

} // namespace mmk
