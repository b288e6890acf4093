#pragma once

#include <chrono>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <fcntl.h>
#include <unistd.h>

#include "mmk/agents.hpp"
#include "mmk/bench.hpp"
#include "mmk/critic.hpp"
#include "mmk/errors.hpp"
#include "mmk/gateway.hpp"
#include "mmk/judge.hpp"
#include "mmk/memory.hpp"
#include "mmk/prompts.hpp"
#include "mmk/sandbox.hpp"
#include "mmk/util.hpp"

namespace mmk {

// ---------------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------------

enum class RunMode { vanilla, tool_agent, modeling_agent };

inline std::string_view run_mode_name(RunMode m) {
    switch (m) {
        case RunMode::vanilla: return "vanilla";
        case RunMode::tool_agent: return "tool";
        case RunMode::modeling_agent: return "agent";
    }
    return "?";
}

struct RunConfig {
    RunMode mode = RunMode::modeling_agent;
    ChatParams params;
    LoopConfig loop;
    AgentBudgets budgets;
    SandboxConfig sandbox;
    fs::path workspace_root;
    fs::path out_dir;
    fs::path transcript_path;
    std::optional<TranscriptMode> transcript_mode; // nullopt = live
    uint64_t gateway_call_budget = 0;              // 0 = unlimited
    int tool_agent_step_budget = 80;               // total tool steps across the run
    int tool_agent_steps_per_task = 8;
    int max_continuations = 4;                     // vanilla truncation follow-ups
    uint64_t seed = 0; // reserved for stochastic tie-breaks; current pipeline has none
};

struct RunResult {
    bool completed = false;
    fs::path report_path;
    fs::path snapshot_path;
    fs::path history_path;
    uint64_t gateway_calls = 0;
    uint64_t transcript_entries_consumed = 0;
    uint64_t sandbox_dispatches = 0;
    int tool_steps = 0;
    double wall_seconds = 0.0;
    std::vector<std::string> notes;
};

// One run per workspace at a time.
class WorkspaceLock {
public:
    explicit WorkspaceLock(const fs::path& root) : path_(root / ".mmk.lock") {
        fs::create_directories(root);
        int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0)
            throw Error(Errc::invalid_config,
                        "workspace is locked by another run: " + path_.string());
        ::close(fd);
    }
    ~WorkspaceLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    WorkspaceLock(const WorkspaceLock&) = delete;
    WorkspaceLock& operator=(const WorkspaceLock&) = delete;

private:
    fs::path path_;
};

inline const std::vector<std::string>& vanilla_required_sections() {
    static const std::vector<std::string> sections = {
        "Problem Restatement", "Assumptions and Justification", "Model Development",
        "Solution Process",    "Results and Analysis",          "Recommendations",
    };
    return sections;
}

// Every heading the modeling-agent report must contain.
inline std::vector<std::string> report_required_headings() {
    std::vector<std::string> h = {"Problem Restatement", "Assumptions", "Modeling Implementation",
                                  "Modeling Analysis", "Recommendations"};
    for (const auto& a : report_implementation_aspects()) h.push_back(a);
    for (const auto& a : report_analysis_aspects()) h.push_back(a);
    return h;
}

// ---------------------------------------------------------------------------
// critic history -> trend
// ---------------------------------------------------------------------------

// One JSON line per (stage, iteration, candidate); enough to plot mean pool
// score per round.
inline std::string critic_history_jsonl(const SharedMemory& memory) {
    std::ostringstream os;
    for (const auto& entry : memory.query(AgentSource::critic)) {
        const std::string& kind = entry.key.kind;
        if (kind.rfind("critic.", 0) != 0 || kind.rfind(".round") == std::string::npos) continue;
        json state = json::parse(entry.body, nullptr, false);
        if (state.is_discarded()) continue;
        std::string stage = kind.substr(7, kind.size() - 7 - 6); // between critic. and .round
        for (const auto& candidate : state.value("pool", json::array())) {
            json row = {{"stage", stage},
                        {"iteration", state.value("iteration", 0)},
                        {"candidate_id", candidate.value("id", -1)},
                        {"overall", candidate.value("overall", -1)},
                        {"lineage", candidate.value("lineage", "")}};
            os << row.dump() << '\n';
        }
    }
    return os.str();
}

// stage,round,mean_overall CSV for the round-vs-score trend plot.
inline std::string trend_csv(const std::string& history_jsonl) {
    std::map<std::pair<std::string, int>, std::pair<double, int>> buckets;
    for (const auto& line : split_lines(history_jsonl)) {
        if (trim(line).empty()) continue;
        json row = json::parse(line, nullptr, false);
        if (row.is_discarded()) continue;
        auto key = std::make_pair(row.value("stage", ""), row.value("iteration", 0));
        auto& bucket = buckets[key];
        bucket.first += row.value("overall", 0.0);
        bucket.second += 1;
    }
    std::ostringstream os;
    os << "stage,round,mean_overall,candidates\n";
    for (const auto& [key, bucket] : buckets) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.4f", bucket.first / bucket.second);
        os << key.first << ',' << key.second << ',' << buf << ',' << bucket.second << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// orchestrator
// ---------------------------------------------------------------------------

class Orchestrator {
public:
    Orchestrator(RunConfig config, LlmGateway& gateway, const PromptLibrary& prompts)
        : cfg_(std::move(config)), gateway_(gateway), prompts_(prompts) {
        if (cfg_.transcript_mode == TranscriptMode::replay &&
            !fs::is_regular_file(cfg_.transcript_path))
            throw Error(Errc::invalid_config,
                        "replay mode needs an existing transcript: " +
                            cfg_.transcript_path.string());
    }

    RunResult run(const Problem& problem) {
        switch (cfg_.mode) {
            case RunMode::vanilla: return run_vanilla(problem);
            case RunMode::tool_agent: return run_tool_agent(problem);
            case RunMode::modeling_agent: return run_modeling_agent(problem);
        }
        throw Error(Errc::invalid_config, "unknown mode");
    }

    // ---- vanilla generation --------------------------------------------------

    RunResult run_vanilla(const Problem& problem) {
        require_statement(problem);
        auto started = std::chrono::steady_clock::now();
        SharedMemory memory;
        RunResult result;
        memory.put(AgentSource::orchestrator, "problem.statement", problem.statement);
        memory.put(AgentSource::orchestrator, "problem.title", problem.title);

        try {
            std::string report = vanilla_report(problem, memory);
            for (const auto& section : vanilla_required_sections())
                if (!has_heading(report, section))
                    result.notes.push_back("missing section: " + section);
            fs::create_directories(cfg_.out_dir);
            result.report_path = cfg_.out_dir / "report.md";
            write_file(result.report_path, report);
            result.completed = true;
        } catch (const Error& e) {
            result.notes.push_back(e.what());
        }
        finalize(result, memory, started);
        return result;
    }

    // ---- tool agent baseline ---------------------------------------------------

    RunResult run_tool_agent(const Problem& problem) {
        require_statement(problem);
        auto started = std::chrono::steady_clock::now();
        WorkspaceLock lock(cfg_.workspace_root);
        Workspace ws = Workspace::create(cfg_.workspace_root);
        SharedMemory memory;
        Sandbox sandbox = make_sandbox(ws);
        RunResult result;
        memory.put(AgentSource::orchestrator, "problem.statement", problem.statement);
        memory.put(AgentSource::orchestrator, "problem.title", problem.title);
        install_problem_data(problem, ws);

        std::string agent_system =
            prompts_.render("tool_agent", {{"tool_descriptions", tool_descriptions()},
                                           {"scoring_criteria", prompts_.raw("scoring_criteria")}});
        std::string planner_system =
            prompts_.render("tool_agent_planner", {{"tool_descriptions", tool_descriptions()}});

        bool finished = false;
        std::string last_summary = "Nothing has been done yet.";
        try {
            while (!finished && result.tool_steps < cfg_.tool_agent_step_budget) {
                std::string task = plan_first_task(problem, sandbox, planner_system, memory,
                                                   last_summary);
                ToolLoopConfig loop_cfg;
                loop_cfg.step_budget = std::min(cfg_.tool_agent_steps_per_task,
                                                cfg_.tool_agent_step_budget - result.tool_steps);
                loop_cfg.toolless_ends_loop = true;
                loop_cfg.observation_limit = cfg_.sandbox.observation_limit;
                ToolLoop loop(gateway_, sandbox, memory, AgentSource::orchestrator,
                              "tool_agent.task", loop_cfg, cfg_.params);
                std::ostringstream task_text;
                task_text << "Problem statement:\n" << problem.statement << "\n\nCurrent task:\n"
                          << task;
                ToolLoopOutcome outcome = loop.run(agent_system, task_text.str());
                result.tool_steps += outcome.steps;
                finished = outcome.finished;
                std::ostringstream summary;
                summary << "Last task: " << task << "\nSteps used: " << outcome.steps
                        << "\nAgent's closing message:\n" << outcome.last_message;
                last_summary = summary.str();
            }
        } catch (const Error& e) {
            result.notes.push_back(e.what());
        }

        if (!finished && result.notes.empty())
            result.notes.push_back("BudgetExhausted: run stopped after " +
                                   std::to_string(result.tool_steps) + " tool steps");

        if (auto report = gather_markdown(ws)) {
            fs::create_directories(cfg_.out_dir);
            result.report_path = cfg_.out_dir / "report.md";
            write_file(result.report_path, *report);
            result.completed = finished;
        }
        result.sandbox_dispatches = sandbox.dispatch_count();
        finalize(result, memory, started);
        return result;
    }

    // ---- full modeling-agent pipeline --------------------------------------------

    RunResult run_modeling_agent(const Problem& problem) {
        require_statement(problem);
        auto started = std::chrono::steady_clock::now();
        WorkspaceLock lock(cfg_.workspace_root);
        Workspace ws = Workspace::create(cfg_.workspace_root);
        SharedMemory memory;
        Sandbox sandbox = make_sandbox(ws);
        sandbox.set_gateway(&gateway_);
        RunResult result;

        memory.put(AgentSource::orchestrator, "problem.statement", problem.statement);
        memory.put(AgentSource::orchestrator, "problem.title", problem.title);
        install_problem_data(problem, ws);

        Agents agents(gateway_, prompts_, memory, sandbox, cfg_.loop, cfg_.budgets, cfg_.params);
        std::vector<std::string> omissions;

        try {
            ModelingPlan plan = agents.propose_ideas(problem);

            // formulation first; it guides the data search
            std::map<int, MathFormulation> formulations;
            for (const auto& subtask : plan.subtasks) {
                try {
                    formulations[subtask.index] = agents.formalize_model(plan, subtask.index);
                } catch (const Error& e) {
                    omissions.push_back("subtask " + std::to_string(subtask.index) +
                                        " formulation failed: " + e.what());
                }
            }

            std::vector<DataRequest> requests;
            try {
                requests = agents.derive_data_requests(plan);
            } catch (const Error& e) {
                omissions.push_back(std::string("data request derivation failed: ") + e.what());
            }

            std::vector<DataArtifact> artifacts;
            std::set<std::string> searched;
            for (const auto& request : requests) {
                searched.insert(request.slug());
                try {
                    artifacts.push_back(agents.search_data(request));
                } catch (const Error& e) {
                    omissions.push_back("data search '" + request.variable + "' failed: " +
                                        e.what());
                }
            }

            for (const auto& subtask : plan.subtasks) {
                auto it = formulations.find(subtask.index);
                if (it == formulations.end()) continue;
                try {
                    ImplementationRecord record = agents.implement_model(it->second, artifacts);
                    // one feedback round back to the data searcher, then reimplement
                    std::vector<DataRequest> extra;
                    for (const auto& request : record.additional_requests)
                        if (searched.insert(request.slug()).second) extra.push_back(request);
                    if (!extra.empty()) {
                        for (const auto& request : extra) {
                            try {
                                artifacts.push_back(agents.search_data(request));
                            } catch (const Error& e) {
                                omissions.push_back("follow-up data search '" + request.variable +
                                                    "' failed: " + e.what());
                            }
                        }
                        record = agents.implement_model(it->second, artifacts);
                    }
                } catch (const Error& e) {
                    omissions.push_back("subtask " + std::to_string(subtask.index) +
                                        " implementation failed: " + e.what());
                }
            }

            std::string report = agents.write_report(omissions);
            write_file(ws.output_dir() / "report.md", report);
            fs::create_directories(cfg_.out_dir);
            result.report_path = cfg_.out_dir / "report.md";
            write_file(result.report_path, report);
            result.completed = true;
        } catch (const Error& e) {
            result.notes.push_back(e.what());
        }

        for (const auto& o : omissions) result.notes.push_back(o);
        result.sandbox_dispatches = sandbox.dispatch_count();
        finalize(result, memory, started, true);
        return result;
    }

private:
    void require_statement(const Problem& problem) const {
        if (trim(problem.statement).empty())
            throw Error(Errc::invalid_config, "problem statement is empty");
    }

    Sandbox make_sandbox(Workspace& ws) {
        Sandbox sandbox(ws, cfg_.sandbox);
        if (http_) sandbox.set_http_client(http_);
        if (search_) sandbox.set_search_provider(search_);
        if (vision_) sandbox.set_vision_backend(vision_);
        if (ocr_) sandbox.set_ocr_backend(ocr_);
        return sandbox;
    }

public:
    // optional backends threaded into every sandbox this orchestrator creates
    void set_http_client(std::shared_ptr<HttpClient> http) { http_ = std::move(http); }
    void set_search_provider(std::shared_ptr<SearchProvider> p) { search_ = std::move(p); }
    void set_vision_backend(std::shared_ptr<VisionBackend> v) { vision_ = std::move(v); }
    void set_ocr_backend(std::shared_ptr<OcrBackend> o) { ocr_ = std::move(o); }

private:
    std::string vanilla_report(const Problem& problem, SharedMemory& memory) {
        std::ostringstream user;
        user << "Problem statement:\n" << problem.statement << "\n\n";
        if (!problem.subtasks.empty()) {
            user << "Required subtasks:\n";
            for (const auto& s : problem.subtasks) user << "- " << s << '\n';
        }
        ChatRequest req = ChatRequest::simple(
            prompts_.render("vanilla_generation",
                            {{"scoring_criteria", prompts_.raw("scoring_criteria")}}),
            user.str(), cfg_.params);
        memory.put(AgentSource::report_writer, "vanilla.prompt", user.str());

        std::string report;
        Completion part = complete_detailed(req);
        memory.put(AgentSource::report_writer, "vanilla.response", part.text);
        report += part.text;
        int continuations = 0;
        while (part.truncated && continuations < cfg_.max_continuations) {
            ++continuations;
            req.messages.push_back({ChatRole::assistant, part.text});
            req.messages.push_back(
                {ChatRole::user, "Continue the report exactly where you left off."});
            part = complete_detailed(req);
            memory.put(AgentSource::report_writer, "vanilla.response", part.text);
            report += part.text;
        }
        return report;
    }

    std::string plan_first_task(const Problem& problem, Sandbox& sandbox,
                                const std::string& planner_system, SharedMemory& memory,
                                const std::string& last_summary) {
        std::ostringstream user;
        user << "Problem statement:\n" << problem.statement << "\n\n";
        user << "Workspace files:\n";
        auto files = sandbox.file_lister(".");
        if (files.empty()) user << "(empty)\n";
        for (const auto& f : files) user << "- " << f << '\n';
        user << "\nPrevious run outcome:\n" << last_summary << '\n';

        ChatRequest req = ChatRequest::simple(planner_system, user.str(), cfg_.params);
        for (int attempt = 0;; ++attempt) {
            std::string reply = complete_text(req);
            memory.put(AgentSource::orchestrator, "tool_agent.planner.response", reply);
            if (auto task = first_planned_task(reply)) return *task;
            if (attempt >= 1)
                throw Error(Errc::unparseable, "planner emitted no task list after a retry");
            req.messages.push_back({ChatRole::assistant, reply});
            req.messages.push_back(
                {ChatRole::user,
                 "Your reply had no recognizable 'Planned Tasks' list. Reply again with a "
                 "'Planned Tasks' section containing a numbered task list and a 'Feedback' "
                 "section."});
        }
    }

    static std::optional<std::string> first_planned_task(const std::string& planner_reply) {
        bool in_tasks = false;
        for (const auto& line : split_lines(planner_reply)) {
            std::string t = trim(line);
            std::string lower = to_lower(t);
            if (lower.find("planned tasks") != std::string::npos) {
                in_tasks = true;
                continue;
            }
            if (in_tasks) {
                if (lower.rfind("feedback", 0) == 0 ||
                    (t.size() > 1 && t[0] == '#')) // next section
                    break;
                if (t.empty()) continue;
                // accept "1. task", "- task", "* task"
                size_t start = 0;
                if (std::isdigit(static_cast<unsigned char>(t[0]))) {
                    size_t dot = t.find_first_of(".)");
                    if (dot != std::string::npos && dot < 4) start = dot + 1;
                    else continue;
                } else if (t[0] == '-' || t[0] == '*') {
                    start = 1;
                } else {
                    continue;
                }
                std::string task = trim(t.substr(start));
                if (!task.empty()) return task;
            }
        }
        return std::nullopt;
    }

    // Prefers output/report.md, else the largest markdown file in the tree
    // (data/ excluded), ties broken lexicographically.
    std::optional<std::string> gather_markdown(const Workspace& ws) {
        fs::path preferred = ws.output_dir() / "report.md";
        if (fs::is_regular_file(preferred)) return read_file(preferred);
        std::vector<std::pair<std::string, fs::path>> candidates;
        for (auto it = fs::recursive_directory_iterator(ws.root());
             it != fs::recursive_directory_iterator(); ++it) {
            if (!it->is_regular_file()) continue;
            if (is_under(it->path(), ws.data_dir())) continue;
            if (to_lower(it->path().extension().string()) != ".md") continue;
            candidates.emplace_back(ws.relative(it->path()), it->path());
        }
        if (candidates.empty()) return std::nullopt;
        std::sort(candidates.begin(), candidates.end());
        fs::path best = candidates.front().second;
        uintmax_t best_size = fs::file_size(best);
        for (const auto& [rel, path] : candidates) {
            uintmax_t size = fs::file_size(path);
            if (size > best_size) {
                best = path;
                best_size = size;
            }
        }
        return read_file(best);
    }

    void install_problem_data(const Problem& problem, Workspace& ws) {
        fs::path provided = ws.data_dir() / "provided";
        for (const auto& att : problem.attachments) {
            fs::path src = problem.bundle_dir / att.path;
            fs::path dst = provided / att.path;
            fs::create_directories(dst.parent_path());
            fs::copy_file(src, dst, fs::copy_options::overwrite_existing);
            fs::path caption = problem.bundle_dir / (att.path + ".caption.txt");
            if (fs::is_regular_file(caption))
                fs::copy_file(caption, provided / (att.path + ".caption.txt"),
                              fs::copy_options::overwrite_existing);
        }
    }

    void finalize(RunResult& result, const SharedMemory& memory,
                  std::chrono::steady_clock::time_point started, bool with_history = false) {
        fs::create_directories(cfg_.out_dir);
        result.snapshot_path = cfg_.out_dir / "memory.snapshot";
        write_file(result.snapshot_path, memory.snapshot());
        if (with_history) {
            result.history_path = cfg_.out_dir / "critic_history.jsonl";
            write_file(result.history_path, critic_history_jsonl(memory));
        }
        result.gateway_calls = gateway_.calls();
        result.transcript_entries_consumed = gateway_.entries_consumed();
        result.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    }

    Completion complete_detailed(const ChatRequest& req) {
        try {
            return gateway_.complete_detailed(req);
        } catch (const Error& e) {
            if (e.code() == Errc::replay_miss || e.code() == Errc::provider_error)
                throw Error(Errc::gateway_error, e.what());
            throw;
        }
    }

    std::string complete_text(const ChatRequest& req) { return complete_detailed(req).text; }

    RunConfig cfg_;
    LlmGateway& gateway_;
    const PromptLibrary& prompts_;
    std::shared_ptr<HttpClient> http_;
    std::shared_ptr<SearchProvider> search_;
    std::shared_ptr<VisionBackend> vision_;
    std::shared_ptr<OcrBackend> ocr_;
};

} // namespace mmk
