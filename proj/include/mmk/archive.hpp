#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include <boost/iostreams/copy.hpp>
#include <boost/iostreams/filter/bzip2.hpp>
#include <boost/iostreams/filtering_stream.hpp>

#include "mmk/errors.hpp"
#include "mmk/subprocess.hpp"
#include "mmk/util.hpp"

namespace mmk {

struct ArchiveLimits {
    uint64_t max_total_bytes = 256ull * 1024 * 1024;
};

namespace detail {

inline uint16_t rd16(const std::string& b, size_t off) {
    return static_cast<uint16_t>(static_cast<unsigned char>(b[off]) |
                                 (static_cast<unsigned char>(b[off + 1]) << 8));
}

inline uint32_t rd32(const std::string& b, size_t off) {
    return static_cast<uint32_t>(static_cast<unsigned char>(b[off]) |
                                 (static_cast<unsigned char>(b[off + 1]) << 8) |
                                 (static_cast<unsigned char>(b[off + 2]) << 16) |
                                 (static_cast<unsigned char>(b[off + 3]) << 24));
}

inline std::string inflate_raw(const std::string& data, uint64_t expected_size,
                               uint64_t cap) {
    if (expected_size > cap) throw Error(Errc::size_cap_exceeded, "archive entry too large");
    z_stream strm{};
    if (inflateInit2(&strm, -15) != Z_OK)
        throw Error(Errc::malformed_archive, "inflate init failed");
    std::string out(expected_size, '\0');
    strm.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(data.data()));
    strm.avail_in = static_cast<uInt>(data.size());
    strm.next_out = reinterpret_cast<Bytef*>(out.data());
    strm.avail_out = static_cast<uInt>(out.size());
    int rc = inflate(&strm, Z_FINISH);
    inflateEnd(&strm);
    if (rc != Z_STREAM_END || strm.total_out != expected_size)
        throw Error(Errc::malformed_archive, "deflate stream corrupt");
    return out;
}

// gzip (or zlib) stream of unknown output size.
inline std::string inflate_auto(const std::string& data, uint64_t cap) {
    z_stream strm{};
    if (inflateInit2(&strm, 15 + 32) != Z_OK)
        throw Error(Errc::malformed_archive, "inflate init failed");
    std::string out;
    std::vector<char> buf(64 * 1024);
    strm.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(data.data()));
    strm.avail_in = static_cast<uInt>(data.size());
    int rc = Z_OK;
    while (rc != Z_STREAM_END) {
        strm.next_out = reinterpret_cast<Bytef*>(buf.data());
        strm.avail_out = static_cast<uInt>(buf.size());
        rc = inflate(&strm, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&strm);
            throw Error(Errc::malformed_archive, "gzip stream corrupt");
        }
        out.append(buf.data(), buf.size() - strm.avail_out);
        if (out.size() > cap) {
            inflateEnd(&strm);
            throw Error(Errc::size_cap_exceeded, "decompressed data exceeds cap");
        }
        if (rc == Z_OK && strm.avail_in == 0 && strm.avail_out != 0) {
            inflateEnd(&strm);
            throw Error(Errc::malformed_archive, "gzip stream truncated");
        }
    }
    inflateEnd(&strm);
    return out;
}

inline std::string bunzip2(const std::string& data, uint64_t cap) {
    namespace io = boost::iostreams;
    try {
        std::istringstream src(data);
        io::filtering_istream in;
        in.push(io::bzip2_decompressor());
        in.push(src);
        std::string out;
        std::vector<char> buf(64 * 1024);
        while (in) {
            in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
            out.append(buf.data(), static_cast<size_t>(in.gcount()));
            if (out.size() > cap)
                throw Error(Errc::size_cap_exceeded, "decompressed data exceeds cap");
        }
        return out;
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        throw Error(Errc::malformed_archive, std::string("bzip2 stream corrupt: ") + e.what());
    }
}

// Entry names get validated before anything touches the filesystem.
inline fs::path safe_entry_path(const fs::path& dest, const std::string& name) {
    fs::path p(name);
    if (p.is_absolute())
        throw Error(Errc::path_escape, "archive entry has absolute path: " + name);
    fs::path normal = p.lexically_normal();
    if (normal.empty() || normal.begin()->string() == "..")
        throw Error(Errc::path_escape, "archive entry escapes destination: " + name);
    return dest / normal;
}

struct RawEntry {
    std::string name;
    std::string content;
    bool is_dir = false;
};

inline std::vector<RawEntry> read_zip(const std::string& raw, const ArchiveLimits& limits) {
    // locate end-of-central-directory from the back
    if (raw.size() < 22) throw Error(Errc::malformed_archive, "zip too small");
    size_t eocd = std::string::npos;
    size_t scan_start = raw.size() >= 22 + 65536 ? raw.size() - 22 - 65536 : 0;
    for (size_t i = raw.size() - 22 + 1; i-- > scan_start;) {
        if (rd32(raw, i) == 0x06054b50) {
            eocd = i;
            break;
        }
    }
    if (eocd == std::string::npos) throw Error(Errc::malformed_archive, "zip missing EOCD");
    uint16_t count = rd16(raw, eocd + 10);
    uint32_t cd_offset = rd32(raw, eocd + 16);

    std::vector<RawEntry> entries;
    uint64_t total = 0;
    size_t pos = cd_offset;
    for (uint16_t i = 0; i < count; ++i) {
        if (pos + 46 > raw.size() || rd32(raw, pos) != 0x02014b50)
            throw Error(Errc::malformed_archive, "zip central directory corrupt");
        uint16_t method = rd16(raw, pos + 10);
        uint32_t crc = rd32(raw, pos + 16);
        uint32_t csize = rd32(raw, pos + 20);
        uint32_t usize = rd32(raw, pos + 24);
        uint16_t name_len = rd16(raw, pos + 28);
        uint16_t extra_len = rd16(raw, pos + 30);
        uint16_t comment_len = rd16(raw, pos + 32);
        uint32_t local_off = rd32(raw, pos + 42);
        if (pos + 46 + name_len > raw.size())
            throw Error(Errc::malformed_archive, "zip name overruns file");
        std::string name = raw.substr(pos + 46, name_len);
        pos += 46 + name_len + extra_len + comment_len;

        RawEntry entry;
        entry.name = name;
        entry.is_dir = !name.empty() && name.back() == '/';
        if (!entry.is_dir) {
            if (local_off + 30 > raw.size() || rd32(raw, local_off) != 0x04034b50)
                throw Error(Errc::malformed_archive, "zip local header corrupt");
            uint16_t lname = rd16(raw, local_off + 26);
            uint16_t lextra = rd16(raw, local_off + 28);
            size_t data_off = local_off + 30 + lname + lextra;
            if (data_off + csize > raw.size())
                throw Error(Errc::malformed_archive, "zip data overruns file");
            std::string compressed = raw.substr(data_off, csize);
            if (method == 0) {
                if (csize != usize)
                    throw Error(Errc::malformed_archive, "zip stored size mismatch");
                entry.content = std::move(compressed);
            } else if (method == 8) {
                entry.content = inflate_raw(compressed, usize, limits.max_total_bytes);
            } else {
                throw Error(Errc::malformed_archive,
                            "zip compression method " + std::to_string(method) + " unsupported");
            }
            uint32_t actual_crc = static_cast<uint32_t>(
                crc32(0, reinterpret_cast<const Bytef*>(entry.content.data()),
                      static_cast<uInt>(entry.content.size())));
            if (actual_crc != crc)
                throw Error(Errc::malformed_archive, "zip crc mismatch for " + name);
            total += entry.content.size();
            if (total > limits.max_total_bytes)
                throw Error(Errc::size_cap_exceeded, "archive exceeds extraction cap");
        }
        entries.push_back(std::move(entry));
    }
    return entries;
}

inline std::vector<RawEntry> read_tar(const std::string& raw, const ArchiveLimits& limits) {
    std::vector<RawEntry> entries;
    uint64_t total = 0;
    size_t pos = 0;
    auto octal = [&](size_t off, size_t len) -> uint64_t {
        uint64_t v = 0;
        for (size_t i = off; i < off + len; ++i) {
            char c = raw[i];
            if (c == '\0' || c == ' ') continue;
            if (c < '0' || c > '7')
                throw Error(Errc::malformed_archive, "tar header has bad octal field");
            v = v * 8 + static_cast<uint64_t>(c - '0');
        }
        return v;
    };
    while (pos + 512 <= raw.size()) {
        bool all_zero = true;
        for (size_t i = pos; i < pos + 512; ++i)
            if (raw[i] != '\0') {
                all_zero = false;
                break;
            }
        if (all_zero) break;

        std::string name(raw.data() + pos, strnlen(raw.data() + pos, 100));
        std::string prefix(raw.data() + pos + 345, strnlen(raw.data() + pos + 345, 155));
        if (!prefix.empty()) name = prefix + "/" + name;
        uint64_t size = octal(pos + 124, 12);
        char type = raw[pos + 156];
        if (pos + 512 + size > raw.size())
            throw Error(Errc::malformed_archive, "tar entry overruns file");

        RawEntry entry;
        entry.name = name;
        if (type == '5') {
            entry.is_dir = true;
        } else if (type == '0' || type == '\0') {
            entry.content = raw.substr(pos + 512, size);
            total += size;
            if (total > limits.max_total_bytes)
                throw Error(Errc::size_cap_exceeded, "archive exceeds extraction cap");
        } else {
            // links, devices etc. are skipped rather than materialized
            pos += 512 + ((size + 511) / 512) * 512;
            continue;
        }
        entries.push_back(std::move(entry));
        pos += 512 + ((size + 511) / 512) * 512;
    }
    if (entries.empty() && raw.size() < 1024)
        throw Error(Errc::malformed_archive, "not a tar archive");
    return entries;
}

inline std::vector<fs::path> materialize(const std::vector<RawEntry>& entries,
                                         const fs::path& dest) {
    // validate every name before writing anything
    for (const auto& e : entries) safe_entry_path(dest, e.name);
    std::vector<fs::path> written;
    for (const auto& e : entries) {
        fs::path target = safe_entry_path(dest, e.name);
        if (e.is_dir) {
            fs::create_directories(target);
        } else {
            write_file(target, e.content);
            written.push_back(target);
        }
    }
    return written;
}

} // namespace detail

enum class ArchiveFormat { zip, tar, tar_gz, tar_bz2, gz, bz2, rar, seven_z };

inline std::optional<ArchiveFormat> archive_format_for(const fs::path& path) {
    std::string name = to_lower(path.filename().string());
    auto ends = [&](std::string_view suffix) {
        return name.size() >= suffix.size() &&
               name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (ends(".zip")) return ArchiveFormat::zip;
    if (ends(".tar.gz") || ends(".tgz")) return ArchiveFormat::tar_gz;
    if (ends(".tar.bz2") || ends(".tbz2")) return ArchiveFormat::tar_bz2;
    if (ends(".tar")) return ArchiveFormat::tar;
    if (ends(".gz")) return ArchiveFormat::gz;
    if (ends(".bz2")) return ArchiveFormat::bz2;
    if (ends(".rar")) return ArchiveFormat::rar;
    if (ends(".7z")) return ArchiveFormat::seven_z;
    return std::nullopt;
}

struct ExternalHelpers {
    std::string rar_command;     // e.g. "unrar"; empty = not configured
    std::string seven_z_command; // e.g. "7z"
};

// Extracts `archive_path` into `dest`. Core formats are handled natively;
// rar/7z go through optional helper binaries.
inline std::vector<fs::path> extract_archive(const fs::path& archive_path, const fs::path& dest,
                                             const ArchiveLimits& limits = {},
                                             const ExternalHelpers& helpers = {}) {
    auto format = archive_format_for(archive_path);
    if (!format)
        throw Error(Errc::unsupported_archive,
                    "unrecognized archive extension: " + archive_path.filename().string());
    if (!fs::is_regular_file(archive_path))
        throw Error(Errc::not_found, archive_path.string());

    auto stem_without = [&](std::string_view suffix) {
        std::string name = archive_path.filename().string();
        return name.substr(0, name.size() - suffix.size());
    };

    switch (*format) {
        case ArchiveFormat::zip:
            return detail::materialize(detail::read_zip(read_file(archive_path), limits), dest);
        case ArchiveFormat::tar:
            return detail::materialize(detail::read_tar(read_file(archive_path), limits), dest);
        case ArchiveFormat::tar_gz: {
            std::string tar = detail::inflate_auto(read_file(archive_path), limits.max_total_bytes);
            return detail::materialize(detail::read_tar(tar, limits), dest);
        }
        case ArchiveFormat::tar_bz2: {
            std::string tar = detail::bunzip2(read_file(archive_path), limits.max_total_bytes);
            return detail::materialize(detail::read_tar(tar, limits), dest);
        }
        case ArchiveFormat::gz: {
            fs::path target = detail::safe_entry_path(dest, stem_without(".gz"));
            write_file(target, detail::inflate_auto(read_file(archive_path), limits.max_total_bytes));
            return {target};
        }
        case ArchiveFormat::bz2: {
            fs::path target = detail::safe_entry_path(dest, stem_without(".bz2"));
            write_file(target, detail::bunzip2(read_file(archive_path), limits.max_total_bytes));
            return {target};
        }
        case ArchiveFormat::rar:
        case ArchiveFormat::seven_z: {
            const std::string& cmd = *format == ArchiveFormat::rar ? helpers.rar_command
                                                                   : helpers.seven_z_command;
            if (cmd.empty())
                throw Error(Errc::external_helper_missing,
                            std::string(*format == ArchiveFormat::rar ? "rar" : "7z") +
                                " extraction needs a configured helper binary");
            if (!command_exists(cmd))
                throw Error(Errc::external_helper_missing, "helper not on PATH: " + cmd);
            fs::create_directories(dest);
            std::vector<std::string> argv;
            if (*format == ArchiveFormat::rar)
                argv = {cmd, "x", "-o+", fs::absolute(archive_path).string(),
                        fs::absolute(dest).string() + "/"};
            else
                argv = {cmd, "x", "-y", "-o" + fs::absolute(dest).string(),
                        fs::absolute(archive_path).string()};
            auto res = run_process(argv, dest, std::chrono::minutes(5));
            if (res.exit_code != 0)
                throw Error(Errc::malformed_archive,
                            "helper failed (" + std::to_string(res.exit_code) + "): " + res.err);
            std::vector<fs::path> out;
            for (auto it = fs::recursive_directory_iterator(dest);
                 it != fs::recursive_directory_iterator(); ++it)
                if (it->is_regular_file()) out.push_back(it->path());
            return out;
        }
    }
    throw Error(Errc::unsupported_archive, "unhandled format");
}

} // namespace mmk
