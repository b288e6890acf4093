// mmkit — command line front end: solve a problem bundle, judge a report,
// categorize a bundle's difficulty, or export a critic score trend.

#include <cstdlib>
#include <iostream>
#include <memory>

#include <CLI11.hpp>

#include "mmk/bench.hpp"
#include "mmk/gateway_http.hpp"
#include "mmk/judge.hpp"
#include "mmk/orchestrator.hpp"

namespace {

using namespace mmk;

struct GatewayArgs {
    std::string transcript;
    bool record = false;
    bool replay = false;
    uint64_t call_budget = 0;
};

void add_gateway_flags(CLI::App* cmd, GatewayArgs& args) {
    cmd->add_option("--transcript", args.transcript, "transcript file for record/replay");
    cmd->add_flag("--record", args.record, "record provider responses into --transcript");
    cmd->add_flag("--replay", args.replay, "replay responses from --transcript (offline)");
    cmd->add_option("--budget-calls", args.call_budget, "max gateway calls (0 = unlimited)");
}

LlmGateway make_gateway(const GatewayArgs& args) {
    GatewayConfig cfg;
    cfg.call_budget = args.call_budget;
    if (args.record && args.replay)
        throw Error(Errc::invalid_config, "--record and --replay are mutually exclusive");
    if (args.replay) {
        if (args.transcript.empty())
            throw Error(Errc::invalid_config, "--replay needs --transcript");
        return LlmGateway::replaying(Transcript::load(args.transcript), cfg);
    }
    auto backend = std::make_shared<HttpChatBackend>(ProviderConfig::from_env());
    if (args.record) {
        if (args.transcript.empty())
            throw Error(Errc::invalid_config, "--record needs --transcript");
        auto gw = LlmGateway::recording(backend, cfg);
        gw.set_record_path(args.transcript);
        return gw;
    }
    return LlmGateway::live(backend, cfg);
}

ChatParams params_from_env() {
    ChatParams params;
    if (const char* model = std::getenv("MMK_MODEL")) params.model_name = model;
    return params;
}

// --config overrides flags (documented behavior).
void apply_config_file(const std::string& path, RunConfig& cfg) {
    json j = json::parse(read_file(path), nullptr, false);
    if (j.is_discarded())
        throw Error(Errc::invalid_config, "config file is not valid JSON: " + path);
    if (j.contains("n")) cfg.loop.n = j["n"].get<int>();
    if (j.contains("k")) cfg.loop.k = j["k"].get<int>();
    if (j.contains("M")) cfg.loop.M = j["M"].get<int>();
    if (j.contains("explore_with_feedback"))
        cfg.loop.explore_with_feedback = j["explore_with_feedback"].get<bool>();
    if (j.contains("seed")) cfg.seed = j["seed"].get<uint64_t>();
    if (j.contains("temperature")) cfg.params.temperature = j["temperature"].get<double>();
    if (j.contains("max_tokens")) cfg.params.max_tokens = j["max_tokens"].get<int>();
    if (j.contains("model")) cfg.params.model_name = j["model"].get<std::string>();
    if (j.contains("data_steps")) cfg.budgets.data_steps = j["data_steps"].get<int>();
    if (j.contains("impl_steps")) cfg.budgets.impl_steps = j["impl_steps"].get<int>();
    if (j.contains("accept_threshold"))
        cfg.budgets.accept_threshold = j["accept_threshold"].get<int>();
    if (j.contains("tool_agent_step_budget"))
        cfg.tool_agent_step_budget = j["tool_agent_step_budget"].get<int>();
}

int cmd_solve(const std::string& bundle, RunConfig cfg, const GatewayArgs& gw_args,
              const std::string& prompts_dir, const std::string& config_file) {
    if (!config_file.empty()) apply_config_file(config_file, cfg);
    if (gw_args.replay) cfg.transcript_mode = TranscriptMode::replay;
    else if (gw_args.record) cfg.transcript_mode = TranscriptMode::record;
    cfg.transcript_path = gw_args.transcript;

    Problem problem = load_problem(bundle);
    PromptLibrary prompts(prompts_dir.empty() ? PromptLibrary::default_dir() : fs::path(prompts_dir));
    LlmGateway gateway = make_gateway(gw_args);
    Orchestrator orchestrator(cfg, gateway, prompts);
    orchestrator.set_http_client(std::make_shared<HttplibClient>());

    RunResult result = orchestrator.run(problem);
    std::cout << "mode: " << run_mode_name(cfg.mode) << '\n'
              << "completed: " << (result.completed ? "yes" : "no") << '\n';
    if (!result.report_path.empty()) std::cout << "report: " << result.report_path.string() << '\n';
    std::cout << "memory snapshot: " << result.snapshot_path.string() << '\n';
    if (!result.history_path.empty())
        std::cout << "critic history: " << result.history_path.string() << '\n';
    std::cout << "gateway calls: " << result.gateway_calls << '\n'
              << "sandbox dispatches: " << result.sandbox_dispatches << '\n';
    for (const auto& note : result.notes) std::cout << "note: " << note << '\n';
    return result.completed ? 0 : 1;
}

int cmd_judge(const std::string& report_path, const std::string& bundle,
              const GatewayArgs& gw_args, const std::string& prompts_dir,
              const std::string& out_path) {
    Problem problem = load_problem(bundle);
    std::string report = read_file(report_path);
    PromptLibrary prompts(prompts_dir.empty() ? PromptLibrary::default_dir() : fs::path(prompts_dir));
    LlmGateway gateway = make_gateway(gw_args);
    JudgeConfig jcfg;
    jcfg.params = params_from_env();
    Judge judge(gateway, prompts, jcfg);

    Scorecard card = judge.judge_report(report, problem);
    std::string serialized = card.to_json().dump(2);
    if (!out_path.empty()) {
        write_file(out_path, serialized + "\n");
        std::cout << "scorecard: " << out_path << '\n';
    } else {
        std::cout << serialized << '\n';
    }
    std::cout << "final: " << card.final_score << '\n';
    return 0;
}

int cmd_categorize(const std::string& bundle, const GatewayArgs& gw_args,
                   const std::string& prompts_dir) {
    Problem problem = load_problem(bundle);
    PromptLibrary prompts(prompts_dir.empty() ? PromptLibrary::default_dir() : fs::path(prompts_dir));
    LlmGateway gateway = make_gateway(gw_args);
    CategoryRating rating = categorize_problem(problem, gateway, prompts, params_from_env());
    std::cout << "data_accessibility: " << rating_letter(rating.data_accessibility) << '\n'
              << "modeling_difficulty: " << rating_letter(rating.modeling_difficulty) << '\n'
              << "image_clarity: " << rating_letter(rating.image_clarity) << '\n'
              << "difficulty: " << difficulty_name(classify_difficulty(rating)) << '\n';
    return 0;
}

int cmd_trend(const std::string& history_path, const std::string& out_path) {
    std::string csv = trend_csv(read_file(history_path));
    if (!out_path.empty()) {
        write_file(out_path, csv);
        std::cout << "trend: " << out_path << '\n';
    } else {
        std::cout << csv;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"math-modeling agent workbench"};
    app.require_subcommand(1);

    // solve
    std::string solve_bundle, solve_mode = "agent", solve_out = "runs/out",
                solve_workspace, solve_prompts, solve_config;
    GatewayArgs solve_gw;
    RunConfig run_cfg;
    auto* solve = app.add_subcommand("solve", "solve a problem bundle end to end");
    solve->add_option("bundle", solve_bundle, "problem bundle directory")->required();
    solve->add_option("--mode", solve_mode, "vanilla | tool | agent")
        ->check(CLI::IsMember({"vanilla", "tool", "agent"}));
    solve->add_option("--out", solve_out, "output directory");
    solve->add_option("--workspace", solve_workspace, "workspace root (default <out>/workspace)");
    solve->add_option("--n", run_cfg.loop.n, "critic pool size");
    solve->add_option("--k", run_cfg.loop.k, "critic discard count");
    solve->add_option("--M", run_cfg.loop.M, "critic iterations");
    solve->add_option("--seed", run_cfg.seed, "random seed");
    solve->add_option("--prompts", solve_prompts, "prompt template directory");
    solve->add_option("--config", solve_config, "JSON config file (overrides flags)");
    add_gateway_flags(solve, solve_gw);

    // judge
    std::string judge_report, judge_bundle, judge_prompts, judge_out;
    GatewayArgs judge_gw;
    auto* judge = app.add_subcommand("judge", "score a report with the multi-expert judge");
    judge->add_option("report", judge_report, "report markdown file")->required();
    judge->add_option("bundle", judge_bundle, "problem bundle directory")->required();
    judge->add_option("--out", judge_out, "scorecard output file");
    judge->add_option("--prompts", judge_prompts, "prompt template directory");
    add_gateway_flags(judge, judge_gw);

    // bench categorize
    std::string cat_bundle, cat_prompts;
    GatewayArgs cat_gw;
    auto* bench = app.add_subcommand("bench", "benchmark bundle utilities");
    auto* categorize = bench->add_subcommand("categorize", "rate a bundle's difficulty");
    categorize->add_option("bundle", cat_bundle, "problem bundle directory")->required();
    categorize->add_option("--prompts", cat_prompts, "prompt template directory");
    add_gateway_flags(categorize, cat_gw);

    // trend
    std::string trend_history, trend_out;
    auto* trend = app.add_subcommand("trend", "mean critic score per round as CSV");
    trend->add_option("history", trend_history, "critic_history.jsonl from a run")->required();
    trend->add_option("--out", trend_out, "CSV output file (default stdout)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (solve->parsed()) {
            run_cfg.mode = solve_mode == "vanilla" ? RunMode::vanilla
                           : solve_mode == "tool" ? RunMode::tool_agent
                                                  : RunMode::modeling_agent;
            run_cfg.out_dir = solve_out;
            run_cfg.workspace_root =
                solve_workspace.empty() ? run_cfg.out_dir / "workspace" : fs::path(solve_workspace);
            run_cfg.params = params_from_env();
            run_cfg.gateway_call_budget = solve_gw.call_budget;
            return cmd_solve(solve_bundle, run_cfg, solve_gw, solve_prompts, solve_config);
        }
        if (judge->parsed())
            return cmd_judge(judge_report, judge_bundle, judge_gw, judge_prompts, judge_out);
        if (categorize->parsed()) return cmd_categorize(cat_bundle, cat_gw, cat_prompts);
        if (trend->parsed()) return cmd_trend(trend_history, trend_out);
    } catch (const mmk::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
