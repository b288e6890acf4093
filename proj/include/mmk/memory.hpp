#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mmk/errors.hpp"
#include "mmk/util.hpp"

namespace mmk {

// The agents that may write to shared memory.
enum class AgentSource {
    idea_proposer,
    data_searcher,
    model_implementor,
    report_writer,
    critic,
    orchestrator,
};

inline std::string_view source_name(AgentSource s) {
    switch (s) {
        case AgentSource::idea_proposer: return "IdeaProposer";
        case AgentSource::data_searcher: return "DataSearcher";
        case AgentSource::model_implementor: return "ModelImplementor";
        case AgentSource::report_writer: return "ReportWriter";
        case AgentSource::critic: return "Critic";
        case AgentSource::orchestrator: return "Orchestrator";
    }
    return "Unknown";
}

inline std::optional<AgentSource> source_from_name(std::string_view name) {
    if (name == "IdeaProposer") return AgentSource::idea_proposer;
    if (name == "DataSearcher") return AgentSource::data_searcher;
    if (name == "ModelImplementor") return AgentSource::model_implementor;
    if (name == "ReportWriter") return AgentSource::report_writer;
    if (name == "Critic") return AgentSource::critic;
    if (name == "Orchestrator") return AgentSource::orchestrator;
    return std::nullopt;
}

// Key = producing agent + content kind + per-(source,kind) sequence number.
// Rendered as "source/kind/seq"; kind may contain dots but never '/'.
struct MemoryKey {
    AgentSource source{};
    std::string kind;
    uint64_t seq = 0;

    std::string render() const {
        std::ostringstream os;
        os << source_name(source) << '/' << kind << '/' << seq;
        return os.str();
    }

    static std::optional<MemoryKey> parse(std::string_view rendered) {
        size_t a = rendered.find('/');
        size_t b = rendered.rfind('/');
        if (a == std::string_view::npos || b == a) return std::nullopt;
        auto src = source_from_name(rendered.substr(0, a));
        if (!src) return std::nullopt;
        auto seq = parse_long(rendered.substr(b + 1));
        if (!seq || *seq < 0) return std::nullopt;
        MemoryKey key;
        key.source = *src;
        key.kind = std::string(rendered.substr(a + 1, b - a - 1));
        key.seq = static_cast<uint64_t>(*seq);
        if (key.kind.empty()) return std::nullopt;
        return key;
    }

    bool operator==(const MemoryKey& o) const {
        return source == o.source && kind == o.kind && seq == o.seq;
    }
};

struct MemoryEntry {
    MemoryKey key;
    std::string body;
    uint64_t created_at = 0; // logical timestamp (insertion counter)
};

// Append-only shared store. Writes are serialized; entries are immutable once
// inserted, so readers can copy without coordination beyond the mutex.
class SharedMemory {
public:
    MemoryKey put(AgentSource source, std::string_view kind, std::string_view body) {
        if (kind.empty() || kind.find('/') != std::string_view::npos)
            throw std::invalid_argument("memory kind must be non-empty and slash-free");
        std::lock_guard<std::mutex> lock(*mutex_);
        MemoryKey key;
        key.source = source;
        key.kind = std::string(kind);
        key.seq = next_seq_[{source, key.kind}]++;
        MemoryEntry entry;
        entry.key = key;
        entry.body = std::string(body);
        entry.created_at = clock_++;
        entries_.push_back(std::move(entry));
        return key;
    }

    MemoryEntry get(const MemoryKey& key) const {
        std::lock_guard<std::mutex> lock(*mutex_);
        for (const auto& e : entries_)
            if (e.key == key) return e;
        throw Error(Errc::key_not_found, key.render());
    }

    MemoryEntry get(std::string_view rendered) const {
        auto key = MemoryKey::parse(rendered);
        if (!key) throw Error(Errc::key_not_found, "unparseable key " + std::string(rendered));
        return get(*key);
    }

    // Entries matching the filters, in logical-timestamp order.
    std::vector<MemoryEntry> query(std::optional<AgentSource> source = std::nullopt,
                                   std::string_view kind_prefix = {}) const {
        std::lock_guard<std::mutex> lock(*mutex_);
        std::vector<MemoryEntry> out;
        for (const auto& e : entries_) {
            if (source && e.key.source != *source) continue;
            if (!kind_prefix.empty() && e.key.kind.rfind(kind_prefix, 0) != 0) continue;
            out.push_back(e);
        }
        return out;
    }

    size_t size() const {
        std::lock_guard<std::mutex> lock(*mutex_);
        return entries_.size();
    }

    // Archive format: header line, then one record per entry:
    //   <rendered key>\t<timestamp>\t<body length>\n<body bytes>\n
    // The body is length-prefixed so it may contain anything.
    std::string snapshot() const {
        std::lock_guard<std::mutex> lock(*mutex_);
        std::ostringstream os;
        os << "mmk-memory-snapshot v1\n";
        for (const auto& e : entries_) {
            os << e.key.render() << '\t' << e.created_at << '\t' << e.body.size() << '\n';
            os << e.body << '\n';
        }
        return os.str();
    }

    static SharedMemory restore(std::string_view archive) {
        SharedMemory store;
        size_t pos = archive.find('\n');
        if (pos == std::string_view::npos ||
            archive.substr(0, pos) != "mmk-memory-snapshot v1")
            throw Error(Errc::corrupt_archive, "bad snapshot header");
        ++pos;
        while (pos < archive.size()) {
            size_t nl = archive.find('\n', pos);
            if (nl == std::string_view::npos)
                throw Error(Errc::corrupt_archive, "truncated record header");
            std::string_view header = archive.substr(pos, nl - pos);
            size_t t1 = header.find('\t');
            size_t t2 = header.rfind('\t');
            if (t1 == std::string_view::npos || t2 == t1)
                throw Error(Errc::corrupt_archive, "malformed record header");
            auto key = MemoryKey::parse(header.substr(0, t1));
            auto ts = parse_long(header.substr(t1 + 1, t2 - t1 - 1));
            auto len = parse_long(header.substr(t2 + 1));
            if (!key || !ts || !len || *len < 0)
                throw Error(Errc::corrupt_archive, "malformed record header");
            size_t body_start = nl + 1;
            size_t body_len = static_cast<size_t>(*len);
            if (body_start + body_len >= archive.size())
                throw Error(Errc::corrupt_archive, "truncated body");
            if (archive[body_start + body_len] != '\n')
                throw Error(Errc::corrupt_archive, "missing record terminator");
            MemoryEntry entry;
            entry.key = *key;
            entry.body = std::string(archive.substr(body_start, body_len));
            entry.created_at = static_cast<uint64_t>(*ts);
            auto& next = store.next_seq_[{entry.key.source, entry.key.kind}];
            if (entry.key.seq >= next) next = entry.key.seq + 1;
            if (entry.created_at >= store.clock_) store.clock_ = entry.created_at + 1;
            store.entries_.push_back(std::move(entry));
            pos = body_start + body_len + 1;
        }
        return store;
    }

    bool observationally_equal(const SharedMemory& other) const {
        std::scoped_lock lock(*mutex_, *other.mutex_);
        if (entries_.size() != other.entries_.size()) return false;
        for (size_t i = 0; i < entries_.size(); ++i) {
            const auto& a = entries_[i];
            const auto& b = other.entries_[i];
            if (!(a.key == b.key) || a.body != b.body || a.created_at != b.created_at)
                return false;
        }
        return true;
    }

private:
    mutable std::unique_ptr<std::mutex> mutex_ = std::make_unique<std::mutex>();
    std::deque<MemoryEntry> entries_;
    std::map<std::pair<AgentSource, std::string>, uint64_t> next_seq_;
    uint64_t clock_ = 0;
};

} // namespace mmk
