#pragma once

#include <array>
#include <chrono>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mmk/archive.hpp"
#include "mmk/errors.hpp"
#include "mmk/fsx.hpp"
#include "mmk/gateway.hpp"
#include "mmk/html.hpp"
#include "mmk/http.hpp"
#include "mmk/pdf.hpp"
#include "mmk/subprocess.hpp"
#include "mmk/util.hpp"

namespace mmk {

// ---------------------------------------------------------------------------
// workspace
// ---------------------------------------------------------------------------

// Confined directory tree the agents operate in:
//   data/         read-only through agent tools (provided + installed datasets)
//   experiments/  scratch + code written by agents
//   output/       final deliverables
class Workspace {
public:
    static Workspace create(const fs::path& root) {
        fs::create_directories(root / "data");
        fs::create_directories(root / "experiments");
        fs::create_directories(root / "output");
        return Workspace(fs::weakly_canonical(root));
    }

    static Workspace open(const fs::path& root) {
        if (!fs::is_directory(root))
            throw Error(Errc::not_found, "workspace root missing: " + root.string());
        return Workspace(fs::weakly_canonical(root));
    }

    const fs::path& root() const { return root_; }
    fs::path data_dir() const { return root_ / "data"; }
    fs::path experiments_dir() const { return root_ / "experiments"; }
    fs::path output_dir() const { return root_ / "output"; }

    fs::path resolve(std::string_view rel) const { return confine(root_, rel); }

    fs::path resolve_writable(std::string_view rel) const {
        fs::path p = confine(root_, rel);
        if (is_under(p, data_dir()))
            throw Error(Errc::read_only_violation,
                        "data/ is read-only to agents: " + std::string(rel));
        return p;
    }

    std::string relative(const fs::path& abs) const {
        return fs::path(abs).lexically_relative(root_).generic_string();
    }

    // Framework-side installation of a validated dataset; not reachable
    // through agent tool calls.
    fs::path install_data_artifact(const fs::path& staged_dir, const std::string& slug) const {
        fs::path dest = data_dir() / slug;
        fs::create_directories(dest);
        for (const auto& entry : fs::directory_iterator(staged_dir))
            if (entry.is_regular_file())
                fs::copy_file(entry.path(), dest / entry.path().filename(),
                              fs::copy_options::overwrite_existing);
        return dest;
    }

private:
    explicit Workspace(fs::path root) : root_(std::move(root)) {}
    fs::path root_;
};

// ---------------------------------------------------------------------------
// pluggable backends
// ---------------------------------------------------------------------------

struct SearchResult {
    std::string title;
    std::string url;
    std::string snippet;
};

class SearchProvider {
public:
    virtual ~SearchProvider() = default;
    virtual std::vector<SearchResult> search(const std::string& query, int top_k) = 0;
};

class VisionBackend {
public:
    virtual ~VisionBackend() = default;
    virtual std::string caption(const fs::path& image_path) = 0;
};

struct OcrSpan {
    std::string text;
    double confidence = 0.0;
};

class OcrBackend {
public:
    virtual ~OcrBackend() = default;
    virtual std::vector<OcrSpan> detect(const fs::path& image_path) = 0;
};

// ---------------------------------------------------------------------------
// tool protocol
// ---------------------------------------------------------------------------

inline const std::array<std::string_view, 12>& tool_names() {
    static const std::array<std::string_view, 12> names = {
        "file_reader",     "file_writer",   "file_lister",    "file_extractor",
        "web_search",      "web_download",  "url_extractor",  "image_captioner",
        "text_detector",   "pdf_parser",    "python_execution", "solution_generator",
    };
    return names;
}

struct ToolCall {
    std::string tool_name; // empty = no tool selected this step
    json params;           // null unless a tool is selected
    bool finish = false;

    bool has_tool() const { return !tool_name.empty(); }
};

struct ToolResult {
    std::string tool_name;
    bool ok = false;
    std::string output;          // human/agent-readable result text
    json payload;                // structured data when the tool has one
    std::string error;           // non-empty iff ok == false
    double elapsed_s = 0.0;      // runtime only; excluded from serialization

    json to_json() const {
        json j = {{"tool_name", tool_name}, {"ok", ok}, {"output", output}};
        if (!payload.is_null()) j["payload"] = payload;
        if (!ok) j["error"] = error;
        return j;
    }
};

// Parses the per-tool decision object the agents emit:
//   { "<tool>": {"use_tool": bool, "tool_params": {...}|null}, ..., "finish": bool }
inline ToolCall parse_tool_decision(const std::string& model_output) {
    auto parsed = extract_json_object(model_output);
    if (!parsed || !parsed->is_object())
        throw Error(Errc::unparseable, "no decision object found in model output");
    const json& decision = *parsed;

    ToolCall call;
    int selected = 0;
    for (std::string_view name : tool_names()) {
        auto it = decision.find(std::string(name));
        if (it == decision.end() || !it->is_object()) continue;
        const json& spec = *it;
        bool use_tool = false;
        if (spec.contains("use_tool")) {
            if (spec["use_tool"].is_boolean()) use_tool = spec["use_tool"].get<bool>();
            else if (spec["use_tool"].is_string())
                use_tool = to_lower(spec["use_tool"].get<std::string>()) == "true";
        }
        json params = spec.value("tool_params", json());
        if (use_tool) {
            ++selected;
            call.tool_name = std::string(name);
            call.params = params.is_null() ? json::object() : params;
        } else if (!params.is_null()) {
            throw Error(Errc::params_without_use,
                        std::string(name) + " has tool_params but use_tool is false");
        }
    }
    if (selected > 1)
        throw Error(Errc::multiple_tools_selected,
                    std::to_string(selected) + " tools selected; exactly one is allowed");

    if (decision.contains("finish")) {
        const json& fin = decision["finish"];
        if (fin.is_boolean()) call.finish = fin.get<bool>();
        else if (fin.is_string()) call.finish = to_lower(fin.get<std::string>()) == "true";
    }
    if (call.finish && selected > 0)
        throw Error(Errc::unparseable, "finish=true must not select a tool");
    return call;
}

// ---------------------------------------------------------------------------
// sandbox
// ---------------------------------------------------------------------------

struct SandboxConfig {
    size_t file_reader_limit = 50000;
    std::string truncation_marker = "\n[TRUNCATED: 50000 character limit reached]";
    uint64_t download_cap_bytes = 100ull * 1024 * 1024;
    ArchiveLimits archive_limits;
    ExternalHelpers helpers;
    std::string python_command = "python3";
    std::chrono::milliseconds python_timeout{60'000};
    std::chrono::milliseconds python_grace{2'000};
    size_t observation_limit = 6000; // chars of tool output fed back to the model
};

class Sandbox {
public:
    Sandbox(Workspace workspace, SandboxConfig config = {})
        : ws_(std::move(workspace)), cfg_(std::move(config)) {}

    Workspace& workspace() { return ws_; }
    const Workspace& workspace() const { return ws_; }
    const SandboxConfig& config() const { return cfg_; }

    void set_http_client(std::shared_ptr<HttpClient> http) { http_ = std::move(http); }
    void set_search_provider(std::shared_ptr<SearchProvider> p) { search_ = std::move(p); }
    void set_vision_backend(std::shared_ptr<VisionBackend> v) { vision_ = std::move(v); }
    void set_ocr_backend(std::shared_ptr<OcrBackend> o) { ocr_ = std::move(o); }
    void set_gateway(LlmGateway* gw) { gateway_ = gw; }
    void set_observer(std::function<void(const ToolCall&, const ToolResult&)> fn) {
        observer_ = std::move(fn);
    }

    uint64_t dispatch_count() const { return dispatch_count_; }

    // ---- file operations ---------------------------------------------------

    std::string file_reader(std::string_view rel_path) {
        fs::path p = ws_.resolve(rel_path);
        if (!fs::is_regular_file(p)) throw Error(Errc::not_found, std::string(rel_path));
        ensure_readable_format(p);
        std::string content = read_file(p);
        if (content.size() > cfg_.file_reader_limit)
            return content.substr(0, cfg_.file_reader_limit) + cfg_.truncation_marker;
        return content;
    }

    enum class WriteMode { write, append };

    ToolResult file_writer(std::string_view rel_path, std::string_view content, WriteMode mode) {
        std::lock_guard<std::mutex> lock(*fs_mutex_);
        fs::path p = ws_.resolve_writable(rel_path);
        write_file(p, content, mode == WriteMode::append);
        ToolResult r;
        r.tool_name = "file_writer";
        r.ok = true;
        r.output = "wrote " + std::to_string(content.size()) + " bytes to " + ws_.relative(p);
        return r;
    }

    std::vector<std::string> file_lister(std::string_view rel_dir) {
        fs::path dir = ws_.resolve(rel_dir);
        if (!fs::is_directory(dir)) throw Error(Errc::not_found, std::string(rel_dir));
        std::vector<std::string> files;
        for (auto it = fs::recursive_directory_iterator(dir);
             it != fs::recursive_directory_iterator(); ++it)
            if (it->is_regular_file())
                files.push_back(it->path().lexically_relative(dir).generic_string());
        std::sort(files.begin(), files.end());
        return files;
    }

    std::vector<std::string> file_extractor(std::string_view archive_rel, std::string_view dest_rel) {
        std::lock_guard<std::mutex> lock(*fs_mutex_);
        fs::path archive = ws_.resolve(archive_rel);
        fs::path dest = ws_.resolve_writable(dest_rel);
        std::vector<std::string> out;
        for (const auto& p : extract_archive(archive, dest, cfg_.archive_limits, cfg_.helpers))
            out.push_back(ws_.relative(p));
        std::sort(out.begin(), out.end());
        return out;
    }

    // ---- web operations ----------------------------------------------------

    std::vector<SearchResult> web_search(const std::string& query, int top_k) {
        if (top_k <= 0) return {};
        if (!search_) throw Error(Errc::provider_error, "no search provider configured");
        auto results = search_->search(query, top_k);
        if (static_cast<int>(results.size()) > top_k) results.resize(static_cast<size_t>(top_k));
        return results;
    }

    ToolResult web_download(const std::string& url, std::string_view dest_rel) {
        std::lock_guard<std::mutex> lock(*fs_mutex_);
        if (!http_) throw Error(Errc::http_error, "no http client configured");
        fs::path dest = ws_.resolve_writable(dest_rel);
        if (dest.has_parent_path()) fs::create_directories(dest.parent_path());
        std::string body;
        auto response = http_->download(
            url, [&](const char* data, size_t len) { body.append(data, len); },
            cfg_.download_cap_bytes);
        if (response.status < 200 || response.status >= 300)
            throw Error(Errc::http_error, "HTTP " + std::to_string(response.status) + " for " + url);
        write_file(dest, body);
        ToolResult r;
        r.tool_name = "web_download";
        r.ok = true;
        r.output = "downloaded " + std::to_string(body.size()) + " bytes to " + ws_.relative(dest);
        r.payload = {{"bytes", body.size()}, {"path", ws_.relative(dest)}};
        return r;
    }

    std::string url_extractor(const std::string& url) {
        if (!http_) throw Error(Errc::http_error, "no http client configured");
        auto response = http_->get(url);
        if (response.status < 200 || response.status >= 300)
            throw Error(Errc::http_error, "HTTP " + std::to_string(response.status) + " for " + url);
        if (response.content_type.find("html") == std::string::npos)
            throw Error(Errc::non_html_content,
                        "content-type '" + response.content_type + "' is not a webpage");
        return html_to_text(response.body);
    }

    // ---- image and document operations --------------------------------------

    std::string image_captioner(std::string_view image_rel) {
        fs::path image = ws_.resolve(image_rel);
        if (!fs::is_regular_file(image)) throw Error(Errc::not_found, std::string(image_rel));
        fs::path cached = image;
        cached += ".caption.txt";
        if (fs::is_regular_file(cached)) return trim(read_file(cached));
        if (!vision_)
            throw Error(Errc::backend_unconfigured,
                        "no vision backend configured and no cached caption for " +
                            std::string(image_rel));
        return vision_->caption(image);
    }

    std::vector<OcrSpan> text_detector(std::string_view image_rel) {
        fs::path image = ws_.resolve(image_rel);
        if (!fs::is_regular_file(image)) throw Error(Errc::not_found, std::string(image_rel));
        if (!ocr_) throw Error(Errc::backend_unconfigured, "no OCR backend configured");
        return ocr_->detect(image);
    }

    std::string pdf_parser(std::string_view rel_path, std::optional<pdf::PageRange> pages = {}) {
        fs::path p = ws_.resolve(rel_path);
        if (!fs::is_regular_file(p)) throw Error(Errc::not_found, std::string(rel_path));
        return pdf::extract_text(read_file(p), pages.value_or(pdf::PageRange{}));
    }

    // ---- code execution ------------------------------------------------------

    ExecResult python_execution(const std::string& source_or_path,
                                std::optional<std::chrono::milliseconds> timeout = {}) {
        if (!command_exists(cfg_.python_command))
            throw Error(Errc::interpreter_missing, cfg_.python_command + " not on PATH");
        std::vector<std::string> argv;
        bool looks_like_path = source_or_path.find('\n') == std::string::npos &&
                               source_or_path.size() < 512 &&
                               source_or_path.rfind(".py") == source_or_path.size() - 3;
        if (looks_like_path && fs::is_regular_file(ws_.resolve(source_or_path))) {
            fs::path p = ws_.resolve(source_or_path);
            argv = {cfg_.python_command, ws_.relative(p)};
        } else {
            argv = {cfg_.python_command, "-c", source_or_path};
        }
        return run_process(argv, ws_.root(), timeout.value_or(cfg_.python_timeout),
                           cfg_.python_grace);
    }

    // ---- model passthrough ---------------------------------------------------

    std::string solution_generator(const std::string& query,
                                   std::optional<std::string> image_rel = {}) {
        if (trim(query).empty())
            throw Error(Errc::invalid_config, "solution_generator query is empty");
        if (!gateway_) throw Error(Errc::gateway_error, "no gateway attached to sandbox");
        std::ostringstream user;
        user << query;
        if (image_rel) {
            std::string caption = image_captioner(*image_rel);
            user << "\n\nImage description of " << *image_rel << ":\n" << caption;
        }
        ChatRequest req = ChatRequest::simple(
            "You are a helpful analyst. Answer the query directly and concretely.", user.str());
        try {
            return gateway_->complete(req);
        } catch (const Error& e) {
            if (e.code() == Errc::replay_miss || e.code() == Errc::provider_error)
                throw Error(Errc::gateway_error, e.what());
            throw;
        }
    }

    // ---- dispatch --------------------------------------------------------------

    // Total: every call produces a ToolResult; failures are captured, never
    // thrown past this point.
    ToolResult dispatch(const ToolCall& call) {
        ++dispatch_count_;
        auto started = std::chrono::steady_clock::now();
        ToolResult result;
        result.tool_name = call.tool_name;
        try {
            result = dispatch_inner(call);
        } catch (const Error& e) {
            result.ok = false;
            result.error = e.what();
        } catch (const std::exception& e) {
            result.ok = false;
            result.error = std::string("internal error: ") + e.what();
        }
        result.tool_name = call.tool_name;
        if (!result.ok && result.error.empty()) result.error = "tool failed";
        result.elapsed_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        if (observer_) observer_(call, result);
        return result;
    }

private:
    void ensure_readable_format(const fs::path& p) const {
        static const std::set<std::string> binary_ext = {
            ".png", ".jpg", ".jpeg", ".gif", ".bmp", ".pdf", ".zip", ".tar",
            ".gz",  ".bz2", ".rar",  ".7z",  ".xls", ".xlsx", ".doc", ".docx",
            ".so",  ".bin", ".exe",  ".parquet",
        };
        std::string ext = to_lower(p.extension().string());
        if (binary_ext.count(ext))
            throw Error(Errc::unsupported_format,
                        "file_reader handles text formats; got " + ext);
    }

    static std::string require_string(const json& params, const char* key) {
        if (!params.is_object() || !params.contains(key) || !params[key].is_string())
            throw Error(Errc::unparseable, std::string("missing string parameter '") + key + "'");
        return params[key].get<std::string>();
    }

    ToolResult dispatch_inner(const ToolCall& call) {
        ToolResult r;
        r.tool_name = call.tool_name;
        const json& p = call.params;

        if (call.tool_name == "file_reader") {
            std::string path = require_string(p, "path");
            r.output = file_reader(path);
            r.ok = true;
        } else if (call.tool_name == "file_writer") {
            std::string path = require_string(p, "path");
            std::string content = require_string(p, "content");
            std::string mode = p.is_object() ? to_lower(p.value("mode", "write")) : "write";
            r = file_writer(path, content,
                            mode == "append" ? WriteMode::append : WriteMode::write);
        } else if (call.tool_name == "file_lister") {
            std::string dir = p.is_object() ? p.value("directory", p.value("path", ".")) : ".";
            auto files = file_lister(dir);
            std::ostringstream os;
            for (const auto& f : files) os << f << '\n';
            r.output = files.empty() ? "(no files)" : os.str();
            r.payload = json(files);
            r.ok = true;
        } else if (call.tool_name == "file_extractor") {
            std::string archive = require_string(p, "archive_path");
            std::string dest = p.value("destination", "experiments/extracted");
            auto files = file_extractor(archive, dest);
            std::ostringstream os;
            os << "extracted " << files.size() << " files:\n";
            for (const auto& f : files) os << f << '\n';
            r.output = os.str();
            r.payload = json(files);
            r.ok = true;
        } else if (call.tool_name == "web_search") {
            std::string query = require_string(p, "query");
            int top_k = p.value("top_k", 5);
            auto results = web_search(query, top_k);
            json arr = json::array();
            std::ostringstream os;
            for (const auto& res : results) {
                arr.push_back({{"title", res.title}, {"url", res.url}, {"snippet", res.snippet}});
                os << "- " << res.title << " | " << res.url << "\n  " << res.snippet << '\n';
            }
            r.output = results.empty() ? "(no results)" : os.str();
            r.payload = arr;
            r.ok = true;
        } else if (call.tool_name == "web_download") {
            std::string url = require_string(p, "url");
            std::string dest = require_string(p, "destination");
            r = web_download(url, dest);
        } else if (call.tool_name == "url_extractor") {
            std::string url = require_string(p, "url");
            r.output = url_extractor(url);
            r.ok = true;
        } else if (call.tool_name == "image_captioner") {
            std::string path = require_string(p, "image_path");
            r.output = image_captioner(path);
            r.ok = true;
        } else if (call.tool_name == "text_detector") {
            std::string path = require_string(p, "image_path");
            auto spans = text_detector(path);
            json arr = json::array();
            std::ostringstream os;
            for (const auto& s : spans) {
                arr.push_back({{"text", s.text}, {"confidence", s.confidence}});
                os << s.text << " (" << s.confidence << ")\n";
            }
            r.output = spans.empty() ? "(no text found)" : os.str();
            r.payload = arr;
            r.ok = true;
        } else if (call.tool_name == "pdf_parser") {
            std::string path = require_string(p, "path");
            std::optional<pdf::PageRange> range;
            if (p.is_object() && p.contains("pages")) {
                pdf::PageRange pr;
                if (p["pages"].is_string()) {
                    std::string spec = p["pages"].get<std::string>();
                    size_t dash = spec.find('-');
                    auto first = parse_long(dash == std::string::npos ? spec : spec.substr(0, dash));
                    if (!first) throw Error(Errc::unparseable, "bad pages spec: " + spec);
                    pr.first = static_cast<int>(*first);
                    pr.last = pr.first;
                    if (dash != std::string::npos) {
                        auto last = parse_long(spec.substr(dash + 1));
                        if (!last) throw Error(Errc::unparseable, "bad pages spec: " + spec);
                        pr.last = static_cast<int>(*last);
                    }
                } else if (p["pages"].is_object()) {
                    pr.first = p["pages"].value("first", 1);
                    pr.last = p["pages"].value("last", -1);
                }
                range = pr;
            }
            r.output = pdf_parser(path, range);
            r.ok = true;
        } else if (call.tool_name == "python_execution") {
            std::string code = p.is_object() ? p.value("path", p.value("code", "")) : "";
            if (code.empty()) throw Error(Errc::unparseable, "python_execution needs 'path' or 'code'");
            std::optional<std::chrono::milliseconds> timeout;
            if (p.is_object() && p.contains("timeout"))
                timeout = std::chrono::milliseconds(
                    static_cast<long>(p["timeout"].get<double>() * 1000));
            auto exec = python_execution(code, timeout);
            std::ostringstream os;
            os << "exit_code: " << exec.exit_code << '\n';
            if (!exec.out.empty()) os << "stdout:\n" << exec.out;
            if (!exec.err.empty()) os << "stderr:\n" << exec.err;
            r.output = os.str();
            r.payload = {{"exit_code", exec.exit_code}, {"timed_out", exec.timed_out}};
            if (exec.timed_out) {
                r.ok = false;
                r.error = "Timeout: execution exceeded limit";
            } else {
                r.ok = true;
            }
        } else if (call.tool_name == "solution_generator") {
            std::string query = require_string(p, "query");
            std::optional<std::string> image;
            if (p.is_object() && p.contains("image_path") && p["image_path"].is_string())
                image = p["image_path"].get<std::string>();
            r.output = solution_generator(query, image);
            r.ok = true;
        } else {
            throw Error(Errc::unparseable, "unknown tool: " + call.tool_name);
        }
        return r;
    }

    Workspace ws_;
    SandboxConfig cfg_;
    std::shared_ptr<HttpClient> http_;
    std::shared_ptr<SearchProvider> search_;
    std::shared_ptr<VisionBackend> vision_;
    std::shared_ptr<OcrBackend> ocr_;
    LlmGateway* gateway_ = nullptr;
    std::function<void(const ToolCall&, const ToolResult&)> observer_;
    uint64_t dispatch_count_ = 0;
    std::unique_ptr<std::mutex> fs_mutex_ = std::make_unique<std::mutex>();
};

// Deterministic tool list text used to fill {{tool_descriptions}} in the
// tool-use prompts.
inline std::string tool_descriptions() {
    return R"(- file_reader: reads a text file (json, csv, txt, md, ...) from the workspace, returning up to 50,000 characters. tool_params: {"path": "<relative path>"}
- file_writer: writes or appends text content to a file in the workspace (data/ is read-only). tool_params: {"path": "<relative path>", "content": "<text>", "mode": "write"|"append"}
- file_lister: lists all files under a workspace directory recursively, sorted. tool_params: {"directory": "<relative path>"}
- file_extractor: extracts zip/tar/tar.gz/tar.bz2/gz/bz2 (rar/7z with helper) archives inside the workspace. tool_params: {"archive_path": "<relative path>", "destination": "<relative dir>"}
- web_search: performs a web search and returns structured results. tool_params: {"query": "<text>", "top_k": <int>}
- web_download: downloads a URL to a workspace file. tool_params: {"url": "<url>", "destination": "<relative path>"}
- url_extractor: fetches a webpage and returns its visible text. tool_params: {"url": "<url>"}
- image_captioner: returns a detailed caption for an image in the workspace. tool_params: {"image_path": "<relative path>"}
- text_detector: OCR; extracts text spans with confidences from an image. tool_params: {"image_path": "<relative path>"}
- pdf_parser: extracts text from a PDF, optionally for a page range. tool_params: {"path": "<relative path>", "pages": "<first>-<last>"}
- python_execution: runs Python code (inline or a .py file) with the workspace as working directory. tool_params: {"path": "<relative .py>"} or {"code": "<source>"}, optional "timeout" seconds
- solution_generator: asks the underlying model a free-form query, optionally grounded in an image. tool_params: {"query": "<text>", "image_path": "<relative path, optional>"}

For each tool you must specify:
  1) use_tool (boolean): whether to call the tool.
  2) tool_params (object | null): null when use_tool = false, otherwise the tool's arguments.
Respond with a single JSON object mapping each tool name you mention to its decision, plus a top-level "finish" boolean. Exactly one tool may have use_tool = true per step. Set finish = true (and no tool) once the entire task is complete.)";
}

} // namespace mmk
