#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mmk/bench.hpp"
#include "mmk/critic.hpp"
#include "mmk/errors.hpp"
#include "mmk/gateway.hpp"
#include "mmk/memory.hpp"
#include "mmk/prompts.hpp"
#include "mmk/sandbox.hpp"
#include "mmk/util.hpp"

namespace mmk {

// ---------------------------------------------------------------------------
// domain types
// ---------------------------------------------------------------------------

struct ApproachCandidate {
    std::string name;
    std::string application;

    std::string render() const { return "Approach: " + name + "\n\nApplication: " + application; }
};

struct Subtask {
    int index = 0;
    std::string objective;
    std::string analysis;
    std::vector<ApproachCandidate> candidate_approaches;
};

struct ModelingPlan {
    std::string problem_summary;
    std::vector<Subtask> subtasks;
    std::vector<std::string> selected_approach; // body text per subtask

    json to_json() const {
        json subs = json::array();
        for (const auto& s : subtasks) {
            json approaches = json::array();
            for (const auto& a : s.candidate_approaches)
                approaches.push_back({{"name", a.name}, {"application", a.application}});
            subs.push_back({{"index", s.index},
                            {"objective", s.objective},
                            {"analysis", s.analysis},
                            {"approaches", approaches}});
        }
        return json{{"summary", problem_summary},
                    {"subtasks", subs},
                    {"selected", selected_approach}};
    }

    static ModelingPlan from_json(const json& j) {
        ModelingPlan plan;
        plan.problem_summary = j.value("summary", "");
        for (const auto& s : j.value("subtasks", json::array())) {
            Subtask sub;
            sub.index = s.value("index", static_cast<int>(plan.subtasks.size()));
            sub.objective = s.value("objective", "");
            sub.analysis = s.value("analysis", "");
            for (const auto& a : s.value("approaches", json::array()))
                sub.candidate_approaches.push_back(
                    {a.value("name", ""), a.value("application", "")});
            plan.subtasks.push_back(std::move(sub));
        }
        for (const auto& sel : j.value("selected", json::array()))
            plan.selected_approach.push_back(sel.get<std::string>());
        return plan;
    }
};

struct DataRequest {
    std::string variable;
    std::string reason;
    std::string real_world_acquisition;

    std::string slug() const { return slugify(variable); }

    json to_json() const {
        return json{{"variable", variable},
                    {"reason", reason},
                    {"real_world_acquisition", real_world_acquisition}};
    }
};

inline const std::vector<std::string>& data_description_sections() {
    static const std::vector<std::string> sections = {
        "Data Source",     "Content Description", "Processing Steps",
        "Potential Usage", "Limitations",         "Summary",
    };
    return sections;
}

struct DataArtifact {
    std::string variable;
    std::string dir;              // workspace-relative, data/<slug>
    std::string csv_path;         // dir + "/data.csv"
    std::string description_path; // dir + "/data_description.md"
    int critic_overall = 0;

    json to_json() const {
        return json{{"variable", variable},
                    {"dir", dir},
                    {"csv", csv_path},
                    {"description", description_path},
                    {"critic_overall", critic_overall}};
    }
};

struct MathFormulation {
    int subtask_index = 0;
    std::string variables;
    std::string constraints;
    std::string objective;
    std::string formal_model; // the full markdown text

    // Symbols referenced in constraints/objective but never declared in the
    // variables block. Inline-math tokens only; prose is ignored.
    std::vector<std::string> lexical_unknowns() const;
};

struct ExecutionNote {
    std::string target; // script path or "<inline>"
    int exit_code = -1;
    std::string stdout_digest;
    bool timed_out = false;
};

struct ImplementationRecord {
    int subtask_index = 0;
    std::vector<std::string> code_paths;   // under experiments/
    std::vector<ExecutionNote> executions; // every run, failures included
    std::vector<std::string> output_files; // appeared under output/
    std::string analysis_notes;
    std::vector<DataRequest> additional_requests; // feedback edge to the data searcher
    int critic_overall = 0;

    json to_json() const {
        json execs = json::array();
        for (const auto& e : executions)
            execs.push_back({{"target", e.target},
                             {"exit_code", e.exit_code},
                             {"stdout_digest", e.stdout_digest},
                             {"timed_out", e.timed_out}});
        json reqs = json::array();
        for (const auto& r : additional_requests) reqs.push_back(r.to_json());
        return json{{"subtask", subtask_index},
                    {"code_paths", code_paths},
                    {"executions", execs},
                    {"output_files", output_files},
                    {"analysis_notes", analysis_notes},
                    {"additional_requests", reqs},
                    {"critic_overall", critic_overall}};
    }
};

inline std::vector<std::string> MathFormulation::lexical_unknowns() const {
    auto math_tokens = [](const std::string& text) {
        std::set<std::string> tokens;
        size_t pos = 0;
        while ((pos = text.find('$', pos)) != std::string::npos) {
            size_t end = text.find('$', pos + 1);
            if (end == std::string::npos) break;
            std::string inside = text.substr(pos + 1, end - pos - 1);
            // split a math expression into identifier-looking pieces
            std::string current;
            for (char c : inside) {
                if (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '\\') {
                    current.push_back(c);
                } else {
                    if (current.size() > 0 && !std::isdigit(static_cast<unsigned char>(current[0])))
                        tokens.insert(current);
                    current.clear();
                }
            }
            if (!current.empty() && !std::isdigit(static_cast<unsigned char>(current[0])))
                tokens.insert(current);
            pos = end + 1;
        }
        return tokens;
    };

    std::set<std::string> declared = math_tokens(variables);
    std::vector<std::string> unknown;
    for (const auto& tok : math_tokens(constraints + "\n" + objective)) {
        if (declared.count(tok)) continue;
        // accept subscripted uses of a declared base symbol (N_t vs N)
        size_t underscore = tok.find('_');
        if (underscore != std::string::npos && declared.count(tok.substr(0, underscore))) continue;
        if (tok.size() > 1 && tok[0] == '\\') continue; // latex commands
        unknown.push_back(tok);
    }
    return unknown;
}

// ---------------------------------------------------------------------------
// tool loop
// ---------------------------------------------------------------------------

struct ToolLoopConfig {
    int step_budget = 40;
    int toolless_retries = 2;      // then a file_lister call is injected
    std::string fallback_list_dir = ".";
    size_t observation_limit = 6000;
    bool toolless_ends_loop = false; // tool-agent tasks end on a plain reply
};

struct ToolLoopOutcome {
    bool finished = false;
    bool stopped_by_check = false;
    bool ended_toolless = false;
    bool budget_exhausted = false;
    int steps = 0;
    std::string last_message;
    std::vector<std::pair<ToolCall, ToolResult>> trajectory;
};

// Drives one agent/tool conversation: model decision -> dispatch -> observation,
// until finish, an external completion check, or the step budget.
class ToolLoop {
public:
    ToolLoop(LlmGateway& gateway, Sandbox& sandbox, SharedMemory& memory, AgentSource source,
             std::string memory_prefix, ToolLoopConfig config, ChatParams params)
        : gateway_(gateway), sandbox_(sandbox), memory_(memory), source_(source),
          prefix_(std::move(memory_prefix)), cfg_(std::move(config)), params_(std::move(params)) {}

    ToolLoopOutcome run(const std::string& system_prompt, const std::string& task,
                        const std::function<bool(const ToolLoopOutcome&)>& done_check = {}) {
        ToolLoopOutcome outcome;
        memory_.put(source_, prefix_ + ".system", system_prompt);
        memory_.put(source_, prefix_ + ".task", task);

        ChatRequest req;
        req.system = system_prompt;
        req.params = params_;
        req.messages.push_back({ChatRole::user, task});

        int toolless_streak = 0;
        while (outcome.steps < cfg_.step_budget) {
            ++outcome.steps;
            std::string reply = complete(req);
            memory_.put(source_, prefix_ + ".response", reply);
            outcome.last_message = reply;
            req.messages.push_back({ChatRole::assistant, reply});

            ToolCall call;
            try {
                call = parse_tool_decision(reply);
            } catch (const Error& e) {
                push_user(req, std::string("Decision error: ") + e.what() +
                                   ". Reply with a single valid JSON decision object.");
                continue;
            }

            if (call.finish) {
                outcome.finished = true;
                break;
            }

            if (!call.has_tool()) {
                if (cfg_.toolless_ends_loop) {
                    outcome.ended_toolless = true;
                    break;
                }
                ++toolless_streak;
                if (toolless_streak <= cfg_.toolless_retries) {
                    push_user(req,
                              "You MUST use at least one tool in every interaction. Plain-text "
                              "replies are not acceptable. Issue a tool call now.");
                    continue;
                }
                // mandated fallback: check the files instead of stalling
                call.tool_name = "file_lister";
                call.params = {{"directory", cfg_.fallback_list_dir}};
            }
            toolless_streak = 0;

            ToolResult result = sandbox_.dispatch(call);
            record(call, result);
            outcome.trajectory.emplace_back(call, result);
            push_user(req, render_observation(result));

            if (done_check && done_check(outcome)) {
                outcome.stopped_by_check = true;
                break;
            }
        }
        if (!outcome.finished && !outcome.stopped_by_check && !outcome.ended_toolless)
            outcome.budget_exhausted = true;
        return outcome;
    }

private:
    void push_user(ChatRequest& req, std::string text) {
        memory_.put(source_, prefix_ + ".prompt", text);
        req.messages.push_back({ChatRole::user, std::move(text)});
    }

    std::string render_observation(const ToolResult& result) const {
        std::ostringstream os;
        os << "Tool: " << result.tool_name << '\n';
        os << "Status: " << (result.ok ? "ok" : "error") << '\n';
        if (!result.ok) os << "Error: " << result.error << '\n';
        std::string body = result.output;
        if (body.size() > cfg_.observation_limit)
            body = body.substr(0, cfg_.observation_limit) + "\n[observation truncated]";
        if (!body.empty()) os << "Output:\n" << body;
        return os.str();
    }

    void record(const ToolCall& call, const ToolResult& result) {
        json call_json = {{"tool", call.tool_name}, {"params", call.params}};
        memory_.put(source_, prefix_ + ".tool.call", call_json.dump());
        memory_.put(source_, prefix_ + ".tool.result", result.to_json().dump());
    }

    std::string complete(const ChatRequest& req) {
        try {
            return gateway_.complete(req);
        } catch (const Error& e) {
            if (e.code() == Errc::replay_miss || e.code() == Errc::provider_error)
                throw Error(Errc::gateway_error, e.what());
            throw;
        }
    }

    LlmGateway& gateway_;
    Sandbox& sandbox_;
    SharedMemory& memory_;
    AgentSource source_;
    std::string prefix_;
    ToolLoopConfig cfg_;
    ChatParams params_;
};

// ---------------------------------------------------------------------------
// agents
// ---------------------------------------------------------------------------

struct AgentBudgets {
    int data_steps = 40;        // tool steps per data request
    int impl_steps = 60;        // tool steps per implementation subtask
    int toolless_retries = 2;
    int search_rounds = 2;      // critic-gated refinement rounds for data search
    int impl_rounds = 2;        // critic-gated refinement rounds for implementation
    int accept_threshold = 9;   // of 15; data-search acceptance bar
    int json_retries = 1;       // reformat retries for structured replies
};

inline const std::vector<std::string>& report_implementation_aspects() {
    static const std::vector<std::string> v = {
        "Real-World Integration", "Technical Sophistication", "Validation", "Implementation"};
    return v;
}

inline const std::vector<std::string>& report_analysis_aspects() {
    static const std::vector<std::string> v = {
        "Analytical Depth", "Mathematical Rigor", "Results Interpretation", "Critical Analysis",
        "Future Implications"};
    return v;
}

class Agents {
public:
    Agents(LlmGateway& gateway, const PromptLibrary& prompts, SharedMemory& memory,
           Sandbox& sandbox, LoopConfig loop_config = {}, AgentBudgets budgets = {},
           ChatParams params = {})
        : gateway_(gateway), prompts_(prompts), memory_(memory), sandbox_(sandbox),
          loop_config_(loop_config), budgets_(budgets), params_(std::move(params)),
          critic_(gateway, prompts, &memory, params_) {}

    Critic& critic() { return critic_; }

    // ---- idea proposer -------------------------------------------------------

    ModelingPlan propose_ideas(const Problem& problem) {
        if (trim(problem.statement).empty())
            throw Error(Errc::invalid_config, "problem statement is empty");

        std::string system = prompts_.render(
            "idea_proposer", {{"model_reference", prompts_.raw("modeling_reference")}});
        std::ostringstream user;
        user << "Problem statement:\n" << problem.statement << "\n\n";
        if (!problem.subtasks.empty()) {
            user << "The problem lists these required subtasks; refine or extend them:\n";
            for (const auto& s : problem.subtasks) user << "- " << s << '\n';
            user << '\n';
        }
        user << "Respond with a single JSON object:\n"
             << R"({"summary": "<key question>", "subtasks": [{"objective": "...", "analysis": "...", "approaches": [{"name": "...", "application": "..."}]}]})";

        ChatRequest req = ChatRequest::simple(system, user.str(), params_);
        memory_.put(AgentSource::idea_proposer, "idea.prompt", user.str());

        ModelingPlan plan;
        std::string reply;
        for (int attempt = 0;; ++attempt) {
            reply = complete(req);
            memory_.put(AgentSource::idea_proposer, "idea.response", reply);
            auto parsed = extract_json_object(reply);
            if (parsed) {
                plan = parse_plan(*parsed);
                if (!plan.subtasks.empty()) break;
            }
            if (attempt >= budgets_.json_retries)
                throw Error(Errc::empty_decomposition,
                            "no subtasks could be parsed from the idea proposal");
            req.messages.push_back({ChatRole::assistant, reply});
            req.messages.push_back(
                {ChatRole::user, "Your reply could not be parsed. Respond with ONLY the JSON "
                                 "object in the requested schema."});
        }

        // critic loop per subtask selects the approach
        RubricSet rubrics = RubricSet::for_stage(Stage::idea_proposal, loop_config_.scale_max);
        for (auto& subtask : plan.subtasks) {
            std::string target =
                "Subtask objective: " + subtask.objective + "\nAnalysis: " + subtask.analysis;
            auto generator = [&](int index, const std::string& feedback) {
                if (index < static_cast<int>(subtask.candidate_approaches.size()) &&
                    feedback.empty())
                    return subtask.candidate_approaches[static_cast<size_t>(index)].render();
                return explore_idea(subtask, index, feedback);
            };
            auto refiner = [&](const Candidate& candidate, const Critique& critique) {
                return refine_idea(subtask, candidate, critique);
            };
            LoopResult loop = critic_.run_loop(loop_config_, target, generator, refiner, rubrics);
            plan.selected_approach.push_back(loop.final.body);
            memory_.put(AgentSource::idea_proposer,
                        "idea.subtask." + std::to_string(subtask.index) + ".selected",
                        loop.final.body);
        }

        memory_.put(AgentSource::idea_proposer, "idea.plan", plan.to_json().dump());
        memory_.put(AgentSource::idea_proposer, "idea.final", plan.problem_summary);
        return plan;
    }

    // ---- data searcher -------------------------------------------------------

    std::vector<DataRequest> derive_data_requests(const ModelingPlan& plan) {
        if (plan.selected_approach.size() != plan.subtasks.size())
            throw Error(Errc::invalid_config, "plan has unselected approaches");

        std::ostringstream user;
        user << "Modeling plan summary: " << plan.problem_summary << "\n\n";
        for (const auto& subtask : plan.subtasks) {
            user << "Subtask " << subtask.index << ": " << subtask.objective << '\n'
                 << "Chosen approach:\n"
                 << plan.selected_approach[static_cast<size_t>(subtask.index)] << "\n\n";
        }
        user << "Identify the key variables that need real-world data. Respond with a single "
                "JSON object:\n"
             << R"({"requests": [{"variable": "...", "reason": "...", "real_world_acquisition": "..."}]})"
             << "\nReturn an empty list if every quantity is already provided.";

        ChatRequest req =
            ChatRequest::simple(prompts_.render("data_request_derivation"), user.str(), params_);
        std::vector<DataRequest> requests;
        std::string reply;
        for (int attempt = 0;; ++attempt) {
            reply = complete(req);
            memory_.put(AgentSource::data_searcher, "data.requests.response", reply);
            auto parsed = extract_json_object(reply);
            if (parsed && parsed->contains("requests") && (*parsed)["requests"].is_array()) {
                std::set<std::string> seen;
                for (const auto& r : (*parsed)["requests"]) {
                    DataRequest request{r.value("variable", ""), r.value("reason", ""),
                                        r.value("real_world_acquisition", "")};
                    if (request.variable.empty()) continue;
                    if (!seen.insert(request.slug()).second) continue; // dedupe
                    requests.push_back(std::move(request));
                }
                break;
            }
            if (attempt >= budgets_.json_retries)
                throw Error(Errc::gateway_error, "data request derivation was unparseable");
            req.messages.push_back({ChatRole::assistant, reply});
            req.messages.push_back({ChatRole::user,
                                    "Your reply could not be parsed. Respond with ONLY the JSON "
                                    "object in the requested schema."});
        }
        json arr = json::array();
        for (const auto& r : requests) arr.push_back(r.to_json());
        memory_.put(AgentSource::data_searcher, "data.requests", arr.dump());
        return requests;
    }

    DataArtifact search_data(const DataRequest& request) {
        const std::string slug = request.slug();
        const std::string staging = "experiments/search/" + slug;
        memory_.put(AgentSource::data_searcher, "data.request." + slug, request.to_json().dump());

        std::string system = prompts_.render("data_searcher",
                                             {{"tool_descriptions", tool_descriptions()}});
        std::ostringstream task_base;
        task_base << "Data point under investigation:\n"
                  << "variable: " << request.variable << '\n'
                  << "reason: " << request.reason << '\n'
                  << "real_world_acquisition: " << request.real_world_acquisition << "\n\n"
                  << "Work inside the directory `" << staging << "/`. Provided problem data, if "
                  << "any, is under `data/provided/`. Create `" << staging << "/data.csv` and `"
                  << staging << "/data_description.md` exactly.";

        RubricSet rubrics = RubricSet::for_stage(Stage::data_search, loop_config_.scale_max);
        std::string target = "Collect and organize real-world data for variable '" +
                             request.variable + "'. " + request.reason;

        std::optional<Critique> last_critique;
        for (int round = 0;; ++round) {
            ToolLoopConfig loop_cfg;
            loop_cfg.step_budget = budgets_.data_steps;
            loop_cfg.toolless_retries = budgets_.toolless_retries;
            loop_cfg.fallback_list_dir = staging;
            ToolLoop loop(gateway_, sandbox_, memory_, AgentSource::data_searcher,
                          "data." + slug + ".round" + std::to_string(round), loop_cfg, params_);

            std::string task = task_base.str();
            if (last_critique)
                task += "\n\nCritic feedback on your previous attempt (address every point):\n" +
                        last_critique->feedback_text();

            // a round is done once both files exist and this round rewrote both
            auto done = [&](const ToolLoopOutcome& so_far) {
                if (!staged_files_exist(staging)) return false;
                bool csv = false, desc = false;
                for (const auto& [call, result] : so_far.trajectory) {
                    if (call.tool_name != "file_writer" || !result.ok) continue;
                    std::string path = call.params.value("path", "");
                    if (path == staging + "/data.csv") csv = true;
                    if (path == staging + "/data_description.md") desc = true;
                }
                return csv && desc;
            };
            ToolLoopOutcome outcome = loop.run(system, task, done);
            if (!staged_files_exist(staging)) {
                if (outcome.budget_exhausted)
                    throw Error(Errc::step_budget_exhausted,
                                "data search for '" + request.variable + "' exhausted " +
                                    std::to_string(budgets_.data_steps) + " steps");
                validate_artifact_files(staging); // raises ArtifactInvalid with specifics
            }
            validate_artifact_files(staging);

            Candidate version;
            version.id = round;
            version.body = artifact_summary(staging, request);
            Critique critique = critic_.score(version, rubrics, target);
            memory_.put(AgentSource::data_searcher, "data." + slug + ".critique",
                        critique.to_json().dump());

            if (critique.overall >= budgets_.accept_threshold) {
                fs::path installed = sandbox_.workspace().install_data_artifact(
                    sandbox_.workspace().resolve(staging), slug);
                DataArtifact artifact;
                artifact.variable = request.variable;
                artifact.dir = sandbox_.workspace().relative(installed);
                artifact.csv_path = artifact.dir + "/data.csv";
                artifact.description_path = artifact.dir + "/data_description.md";
                artifact.critic_overall = critique.overall;
                memory_.put(AgentSource::data_searcher, "data.variable." + slug,
                            artifact.to_json().dump());
                return artifact;
            }
            if (round + 1 >= budgets_.search_rounds)
                throw Error(Errc::artifact_invalid,
                            "data for '" + request.variable + "' scored " +
                                std::to_string(critique.overall) + "/" +
                                std::to_string(rubrics.max_overall()) + ", below the acceptance "
                                "threshold of " + std::to_string(budgets_.accept_threshold));
            last_critique = critique;
        }
    }

    // ---- model implementor -----------------------------------------------------

    MathFormulation formalize_model(const ModelingPlan& plan, int subtask_index) {
        const Subtask& subtask = plan.subtasks.at(static_cast<size_t>(subtask_index));
        const std::string& approach = plan.selected_approach.at(static_cast<size_t>(subtask_index));
        if (trim(approach).empty())
            throw Error(Errc::invalid_config,
                        "subtask " + std::to_string(subtask_index) + " has no selected approach");

        RubricSet rubrics = RubricSet::for_stage(Stage::math_formulation, loop_config_.scale_max);
        std::string target = "Formalize subtask " + std::to_string(subtask_index) + ": " +
                             subtask.objective;

        auto generator = [&](int index, const std::string& feedback) {
            return generate_formulation(subtask, approach, index, feedback);
        };
        auto refiner = [&](const Candidate& candidate, const Critique& critique) {
            return refine_formulation(subtask, candidate, critique);
        };
        LoopResult loop = critic_.run_loop(loop_config_, target, generator, refiner, rubrics);

        MathFormulation formulation = split_formulation(loop.final.body, subtask_index);
        auto unknowns = formulation.lexical_unknowns();
        if (!unknowns.empty()) {
            std::ostringstream os;
            for (const auto& u : unknowns) os << u << ' ';
            memory_.put(AgentSource::model_implementor,
                        "formulation." + std::to_string(subtask_index) + ".lexical_warning",
                        "symbols used but not declared: " + os.str());
        }
        memory_.put(AgentSource::model_implementor,
                    "formulation." + std::to_string(subtask_index), formulation.formal_model);
        return formulation;
    }

    ImplementationRecord implement_model(const MathFormulation& formulation,
                                         const std::vector<DataArtifact>& artifacts) {
        const int subtask_index = formulation.subtask_index;
        std::string system = prompts_.render("model_implementor_implementation",
                                             {{"tool_descriptions", tool_descriptions()}});

        std::ostringstream task_base;
        task_base << "Mathematical formulation to implement:\n\n"
                  << formulation.formal_model << "\n\n";
        if (!artifacts.empty()) {
            task_base << "Collected datasets:\n";
            for (const auto& artifact : artifacts)
                task_base << "- " << artifact.csv_path << " (variable: " << artifact.variable
                          << ", documented in " << artifact.description_path << ")\n";
        }
        task_base << "\nWrite code under `experiments/`, run it with python_execution, iterate "
                     "on failures, run at least one perturbation experiment, and save figures "
                     "or result tables under `output/`. Set finish=true when done. If you need "
                     "further real-world data, include in your final message a JSON object "
                     "{\"additional_data_requests\": [{\"variable\": ..., \"reason\": ..., "
                     "\"real_world_acquisition\": ...}]} (or an empty list).";

        RubricSet rubrics = RubricSet::for_stage(Stage::model_implementation, loop_config_.scale_max);
        ImplementationRecord record;
        record.subtask_index = subtask_index;
        std::optional<Critique> last_critique;

        for (int round = 0;; ++round) {
            auto outputs_before = list_outputs();
            ToolLoopConfig loop_cfg;
            loop_cfg.step_budget = budgets_.impl_steps;
            loop_cfg.toolless_retries = budgets_.toolless_retries;
            loop_cfg.fallback_list_dir = "experiments";
            ToolLoop loop(gateway_, sandbox_, memory_, AgentSource::model_implementor,
                          "implementation." + std::to_string(subtask_index) + ".round" +
                              std::to_string(round),
                          loop_cfg, params_);

            std::string task = task_base.str();
            if (last_critique)
                task += "\n\nCritic feedback on the previous implementation round (address every "
                        "point):\n" +
                        last_critique->feedback_text();

            ToolLoopOutcome outcome = loop.run(system, task);
            if (outcome.budget_exhausted && outcome.trajectory.empty())
                throw Error(Errc::step_budget_exhausted,
                            "implementation subtask " + std::to_string(subtask_index) +
                                " made no progress in " + std::to_string(budgets_.impl_steps) +
                                " steps");

            absorb_trajectory(record, outcome);
            for (const auto& path : list_outputs())
                if (!outputs_before.count(path) &&
                    std::find(record.output_files.begin(), record.output_files.end(), path) ==
                        record.output_files.end())
                    record.output_files.push_back(path);

            Candidate version;
            version.id = round;
            version.body = implementation_summary(record);
            Critique critique = critic_.score(version, rubrics, "Implement and analyze subtask " +
                                                                    std::to_string(subtask_index));
            record.critic_overall = critique.overall;
            memory_.put(AgentSource::model_implementor,
                        "implementation." + std::to_string(subtask_index) + ".critique",
                        critique.to_json().dump());

            if (critique.overall >= budgets_.accept_threshold || round + 1 >= budgets_.impl_rounds)
                break; // implementation is accepted best-effort; critique stays on record
            last_critique = critique;
        }

        memory_.put(AgentSource::model_implementor,
                    "implementation.record." + std::to_string(subtask_index),
                    record.to_json().dump());
        return record;
    }

    // ---- report writer -----------------------------------------------------------

    // Builds the final report from shared memory alone.
    std::string write_report(const std::vector<std::string>& omissions = {}) {
        auto plan_entries = memory_.query(AgentSource::idea_proposer, "idea.plan");
        auto statement_entries = memory_.query(AgentSource::orchestrator, "problem.statement");
        if (plan_entries.empty() || statement_entries.empty())
            throw Error(Errc::missing_stage, "memory lacks idea.plan / problem.statement");
        json plan_json = json::parse(plan_entries.back().body, nullptr, false);
        if (plan_json.is_discarded())
            throw Error(Errc::missing_stage, "idea.plan entry is unreadable");
        ModelingPlan plan = ModelingPlan::from_json(plan_json);
        std::string title = "Modeling Report";
        auto title_entries = memory_.query(AgentSource::orchestrator, "problem.title");
        if (!title_entries.empty()) title = trim(title_entries.back().body) + " — Modeling Report";

        bool any_implementation = !memory_.query(AgentSource::model_implementor,
                                                 "implementation.record.").empty();
        if (!any_implementation)
            throw Error(Errc::missing_stage, "memory lacks implementation records");

        // framing sections
        json framing = framing_sections(statement_entries.back().body, plan);

        std::ostringstream report;
        report << "# " << title << "\n\n";
        report << "## Problem Restatement\n\n" << framing.value("problem_restatement", "") << "\n\n";
        report << "## Assumptions\n\n";
        for (const auto& a : framing.value("assumptions", json::array()))
            report << "- " << a.get<std::string>() << '\n';
        report << '\n';

        for (const auto& subtask : plan.subtasks) {
            auto record_entries = memory_.query(
                AgentSource::model_implementor,
                "implementation.record." + std::to_string(subtask.index));
            report << "## Subtask " << (subtask.index + 1) << ": " << subtask.objective << "\n\n";
            if (record_entries.empty()) {
                report << "_This subtask could not be completed; see Run Notes._\n\n";
                continue;
            }
            report << subtask_sections(subtask, record_entries.back().body) << "\n\n";
        }

        report << "## Recommendations\n\n";
        for (const auto& r : framing.value("recommendations", json::array()))
            report << "- " << r.get<std::string>() << '\n';

        if (!omissions.empty()) {
            report << "\n## Run Notes\n\n";
            for (const auto& o : omissions) report << "- " << o << '\n';
        }

        std::string text = report.str();
        memory_.put(AgentSource::report_writer, "report.final", text);
        return text;
    }

private:
    // ---- helpers ------------------------------------------------------------

    ModelingPlan parse_plan(const json& j) {
        ModelingPlan plan;
        plan.problem_summary = j.value("summary", "");
        int index = 0;
        for (const auto& s : j.value("subtasks", json::array())) {
            if (!s.is_object()) continue;
            Subtask sub;
            sub.index = index;
            sub.objective = s.value("objective", "");
            sub.analysis = s.value("analysis", "");
            for (const auto& a : s.value("approaches", json::array()))
                if (a.is_object())
                    sub.candidate_approaches.push_back(
                        {a.value("name", ""), a.value("application", "")});
            if (trim(sub.objective).empty()) continue;
            plan.subtasks.push_back(std::move(sub));
            ++index;
        }
        return plan;
    }

    std::string explore_idea(const Subtask& subtask, int index, const std::string& feedback) {
        std::ostringstream user;
        user << "Subtask objective: " << subtask.objective << "\nAnalysis: " << subtask.analysis
             << "\n\nPropose one fresh modeling approach (variant " << index
             << ") that differs from earlier proposals.";
        if (!feedback.empty()) user << "\n\n" << feedback;
        user << "\n\nRespond as:\nApproach: <name>\n\nApplication: <how it applies>";
        ChatRequest req = ChatRequest::simple(
            prompts_.render("idea_proposer", {{"model_reference", prompts_.raw("modeling_reference")}}),
            user.str(), params_);
        return complete(req);
    }

    std::string refine_idea(const Subtask& subtask, const Candidate& candidate,
                            const Critique& critique) {
        std::ostringstream user;
        user << "Subtask objective: " << subtask.objective
             << "\n\nCurrent approach:\n" << candidate.body
             << "\n\nCritic feedback:\n" << critique.feedback_text()
             << "\nRefine the approach to address the feedback. Respond as:\nApproach: "
                "<name>\n\nApplication: <how it applies>";
        ChatRequest req = ChatRequest::simple(
            prompts_.render("idea_proposer", {{"model_reference", prompts_.raw("modeling_reference")}}),
            user.str(), params_);
        return complete(req);
    }

    std::string generate_formulation(const Subtask& subtask, const std::string& approach,
                                     int index, const std::string& feedback) {
        std::ostringstream user;
        user << "Subtask objective: " << subtask.objective << "\nAnalysis: " << subtask.analysis
             << "\n\nChosen modeling approach:\n" << approach << "\n\n";
        if (index > 0) user << "Produce formulation variant " << index << ", distinct from earlier ones.\n";
        if (!feedback.empty()) user << feedback << "\n";
        user << "Write the full formulation in markdown with '## Variables', '## Constraints' "
                "and '## Objective' sections, declaring every symbol in the Variables section "
                "using inline math like $N_t$.";
        ChatRequest req = ChatRequest::simple(prompts_.render("model_implementor_formulation"),
                                              user.str(), params_);
        return complete(req);
    }

    std::string refine_formulation(const Subtask& subtask, const Candidate& candidate,
                                   const Critique& critique) {
        std::ostringstream user;
        user << "Subtask objective: " << subtask.objective
             << "\n\nCurrent formulation:\n" << candidate.body
             << "\n\nCritic feedback:\n" << critique.feedback_text()
             << "\nRewrite the full improved formulation in the same markdown structure.";
        ChatRequest req = ChatRequest::simple(prompts_.render("model_implementor_formulation"),
                                              user.str(), params_);
        return complete(req);
    }

    static MathFormulation split_formulation(const std::string& body, int subtask_index) {
        MathFormulation f;
        f.subtask_index = subtask_index;
        f.formal_model = body;
        std::string current;
        std::ostringstream vars, cons, obj;
        for (const auto& line : split_lines(body)) {
            std::string t = to_lower(trim(line));
            if (!t.empty() && t[0] == '#') {
                if (t.find("variable") != std::string::npos) current = "v";
                else if (t.find("constraint") != std::string::npos) current = "c";
                else if (t.find("objective") != std::string::npos ||
                         t.find("goal") != std::string::npos)
                    current = "o";
                else current.clear();
                continue;
            }
            if (current == "v") vars << line << '\n';
            else if (current == "c") cons << line << '\n';
            else if (current == "o") obj << line << '\n';
        }
        f.variables = vars.str();
        f.constraints = cons.str();
        f.objective = obj.str();
        return f;
    }

    bool staged_files_exist(const std::string& staging) const {
        const auto& ws = sandbox_.workspace();
        std::error_code ec;
        return fs::is_regular_file(ws.root() / staging / "data.csv", ec) &&
               fs::is_regular_file(ws.root() / staging / "data_description.md", ec);
    }

    void validate_artifact_files(const std::string& staging) const {
        const auto& ws = sandbox_.workspace();
        fs::path dir = ws.root() / staging;
        if (!fs::is_directory(dir))
            throw Error(Errc::artifact_invalid, "no files were produced under " + staging);
        bool csv = fs::is_regular_file(dir / "data.csv");
        bool desc = fs::is_regular_file(dir / "data_description.md");
        if (!csv || !desc) {
            std::ostringstream os;
            os << "required files missing under " << staging << ":";
            if (!csv) os << " data.csv";
            if (!desc) os << " data_description.md";
            std::vector<std::string> others;
            for (const auto& entry : fs::directory_iterator(dir))
                if (entry.is_regular_file()) others.push_back(entry.path().filename().string());
            std::sort(others.begin(), others.end());
            if (!others.empty()) {
                os << " (only these exact names are recognized; found:";
                for (const auto& o : others) os << ' ' << o;
                os << ')';
            }
            throw Error(Errc::artifact_invalid, os.str());
        }
        std::string description = read_file(dir / "data_description.md");
        std::vector<std::string> missing;
        for (const auto& section : data_description_sections())
            if (!has_heading(description, section) && !icontains(description, "**" + section))
                missing.push_back(section);
        if (!missing.empty()) {
            std::ostringstream os;
            os << "data_description.md lacks required sections:";
            for (const auto& m : missing) os << ' ' << m << ';';
            throw Error(Errc::artifact_invalid, os.str());
        }
    }

    std::string artifact_summary(const std::string& staging, const DataRequest& request) {
        const auto& ws = sandbox_.workspace();
        std::ostringstream os;
        os << "Variable: " << request.variable << '\n';
        os << "Files under " << staging << ":\n";
        for (const auto& entry : fs::directory_iterator(ws.root() / staging))
            if (entry.is_regular_file()) os << "- " << entry.path().filename().string() << '\n';
        std::string csv = read_file(ws.root() / staging / "data.csv");
        if (csv.size() > 2000) csv = csv.substr(0, 2000) + "\n[truncated]";
        os << "\ndata.csv preview:\n" << csv << '\n';
        os << "\ndata_description.md:\n" << read_file(ws.root() / staging / "data_description.md");
        return os.str();
    }

    std::set<std::string> list_outputs() const {
        std::set<std::string> out;
        const auto& ws = sandbox_.workspace();
        std::error_code ec;
        for (auto it = fs::recursive_directory_iterator(ws.output_dir(), ec);
             it != fs::recursive_directory_iterator(); ++it)
            if (it->is_regular_file()) out.insert(ws.relative(it->path()));
        return out;
    }

    void absorb_trajectory(ImplementationRecord& record, const ToolLoopOutcome& outcome) {
        for (const auto& [call, result] : outcome.trajectory) {
            if (call.tool_name == "file_writer" && result.ok) {
                std::string path = call.params.value("path", "");
                if (path.rfind("experiments/", 0) == 0 &&
                    std::find(record.code_paths.begin(), record.code_paths.end(), path) ==
                        record.code_paths.end())
                    record.code_paths.push_back(path);
            } else if (call.tool_name == "python_execution") {
                ExecutionNote note;
                note.target = call.params.value("path", "<inline>");
                note.exit_code = result.payload.is_object()
                                     ? result.payload.value("exit_code", -1)
                                     : -1;
                note.timed_out = result.payload.is_object() &&
                                 result.payload.value("timed_out", false);
                note.stdout_digest = content_hash(result.output);
                record.executions.push_back(std::move(note));
            }
        }
        if (!outcome.last_message.empty()) {
            record.analysis_notes = outcome.last_message;
            auto parsed = extract_json_object(outcome.last_message);
            if (parsed && parsed->contains("additional_data_requests") &&
                (*parsed)["additional_data_requests"].is_array()) {
                for (const auto& r : (*parsed)["additional_data_requests"]) {
                    if (!r.is_object()) continue;
                    DataRequest request{r.value("variable", ""), r.value("reason", ""),
                                        r.value("real_world_acquisition", "")};
                    if (!request.variable.empty()) record.additional_requests.push_back(request);
                }
            }
        }
    }

    std::string implementation_summary(const ImplementationRecord& record) const {
        std::ostringstream os;
        os << "Code files:\n";
        for (const auto& p : record.code_paths) os << "- " << p << '\n';
        os << "Executions:\n";
        for (const auto& e : record.executions)
            os << "- " << e.target << " exit=" << e.exit_code
               << (e.timed_out ? " (timed out)" : "") << '\n';
        os << "Outputs:\n";
        for (const auto& o : record.output_files) os << "- " << o << '\n';
        os << "Analysis notes:\n" << record.analysis_notes << '\n';
        return os.str();
    }

    json framing_sections(const std::string& statement, const ModelingPlan& plan) {
        std::ostringstream user;
        user << "Problem statement:\n" << statement << "\n\nPlan summary: " << plan.problem_summary
             << "\n\nRespond with a single JSON object:\n"
             << R"({"problem_restatement": "<paragraph>", "assumptions": ["...", "..."], "recommendations": ["...", "..."]})";
        ChatRequest req =
            ChatRequest::simple(prompts_.render("report_framing"), user.str(), params_);
        std::string reply;
        for (int attempt = 0;; ++attempt) {
            reply = complete(req);
            memory_.put(AgentSource::report_writer, "report.framing.response", reply);
            auto parsed = extract_json_object(reply);
            if (parsed && parsed->contains("problem_restatement")) return *parsed;
            if (attempt >= budgets_.json_retries)
                throw Error(Errc::gateway_error, "report framing reply was unparseable");
            req.messages.push_back({ChatRole::assistant, reply});
            req.messages.push_back({ChatRole::user,
                                    "Your reply could not be parsed. Respond with ONLY the JSON "
                                    "object in the requested schema."});
        }
    }

    std::string subtask_sections(const Subtask& subtask, const std::string& record_json) {
        json record = json::parse(record_json, nullptr, false);
        auto formulation_entries = memory_.query(
            AgentSource::model_implementor, "formulation." + std::to_string(subtask.index));

        std::ostringstream user;
        user << "Target modeling method (subtask " << subtask.index << "): " << subtask.objective
             << "\n\nFormulation overview:\n";
        if (!formulation_entries.empty()) user << formulation_entries.front().body << "\n";
        user << "\nOperations performed (implementation record):\n" << record_json << "\n\n";
        user << "Write the two sections in markdown. Use exactly these headings:\n"
             << "### Modeling Implementation\n";
        for (const auto& a : report_implementation_aspects()) user << "#### " << a << '\n';
        user << "### Modeling Analysis\n";
        for (const auto& a : report_analysis_aspects()) user << "#### " << a << '\n';
        user << "Reference the produced output files by path where relevant.";

        ChatRequest req =
            ChatRequest::simple(prompts_.render("report_writer"), user.str(), params_);
        std::string reply;
        for (int attempt = 0;; ++attempt) {
            reply = complete(req);
            memory_.put(AgentSource::report_writer,
                        "report.subtask." + std::to_string(subtask.index) + ".response", reply);
            if (sections_complete(reply)) return reply;
            if (attempt >= budgets_.json_retries) break;
            req.messages.push_back({ChatRole::assistant, reply});
            req.messages.push_back(
                {ChatRole::user,
                 "Your reply is missing some of the required headings. Rewrite it using every "
                 "heading exactly as specified."});
        }
        // last resort: keep the text but guarantee the mandated structure
        std::ostringstream wrapped;
        wrapped << "### Modeling Implementation\n\n" << reply << "\n\n";
        for (const auto& a : report_implementation_aspects())
            if (!has_heading(reply, a))
                wrapped << "#### " << a << "\n\nNot separately provided; see the narrative above.\n\n";
        wrapped << "### Modeling Analysis\n\n";
        for (const auto& a : report_analysis_aspects())
            if (!has_heading(reply, a))
                wrapped << "#### " << a << "\n\nNot separately provided; see the narrative above.\n\n";
        return wrapped.str();
    }

    static bool sections_complete(const std::string& text) {
        if (!has_heading(text, "Modeling Implementation") ||
            !has_heading(text, "Modeling Analysis"))
            return false;
        for (const auto& a : report_implementation_aspects())
            if (!has_heading(text, a)) return false;
        for (const auto& a : report_analysis_aspects())
            if (!has_heading(text, a)) return false;
        return true;
    }

    std::string complete(const ChatRequest& req) {
        try {
            return gateway_.complete(req);
        } catch (const Error& e) {
            if (e.code() == Errc::replay_miss || e.code() == Errc::provider_error)
                throw Error(Errc::gateway_error, e.what());
            throw;
        }
    }

    LlmGateway& gateway_;
    const PromptLibrary& prompts_;
    SharedMemory& memory_;
    Sandbox& sandbox_;
    LoopConfig loop_config_;
    AgentBudgets budgets_;
    ChatParams params_;
    Critic critic_;
};

} // namespace mmk
