#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mmk/errors.hpp"
#include "mmk/gateway.hpp"
#include "mmk/memory.hpp"
#include "mmk/prompts.hpp"
#include "mmk/util.hpp"

namespace mmk {

// ---------------------------------------------------------------------------
// rubrics
// ---------------------------------------------------------------------------

enum class Stage { idea_proposal, math_formulation, data_search, model_implementation };

inline std::string_view stage_name(Stage s) {
    switch (s) {
        case Stage::idea_proposal: return "IdeaProposal";
        case Stage::math_formulation: return "MathFormulation";
        case Stage::data_search: return "DataSearch";
        case Stage::model_implementation: return "ModelImplementation";
    }
    return "?";
}

struct Rubric {
    std::string name;
    std::string description;
    int scale_max = 5;
    std::vector<std::string> aliases; // accepted key stems in model JSON
};

struct RubricSet {
    Stage stage{};
    std::vector<Rubric> rubrics;

    int max_overall() const {
        int total = 0;
        for (const auto& r : rubrics) total += r.scale_max;
        return total;
    }

    static RubricSet for_stage(Stage stage, int scale_max = 5) {
        RubricSet set;
        set.stage = stage;
        auto add = [&](std::string name, std::string description,
                       std::vector<std::string> aliases) {
            set.rubrics.push_back({std::move(name), std::move(description), scale_max,
                                   std::move(aliases)});
        };
        switch (stage) {
            case Stage::idea_proposal:
                add("Relevance",
                    "Determine if the proposed approach adequately addresses the subtask "
                    "objective, and identify any gaps or potential improvements.",
                    {"relevance"});
                add("Mathematical Rigor",
                    "Evaluate whether the proposed idea is mathematically sound and accounts "
                    "for all critical factors, highlighting missing components and suggesting "
                    "refinements.",
                    {"mathematical_rigor", "rigorous", "rigor"});
                add("Practical Feasibility",
                    "Assess whether the proposed idea is realistically feasible given limited "
                    "online resources, basic computational tools (such as Python libraries), "
                    "and data accessibility, identifying potential challenges.",
                    {"practical_feasibility", "practical", "feasibility"});
                break;
            case Stage::math_formulation:
                add("Comprehensiveness",
                    "Assess whether the mathematical formulation thoroughly addresses the "
                    "subtask objective, and identify any missing elements or areas for "
                    "refinement.",
                    {"comprehensiveness", "comprehensive"});
                add("Mathematical Rigor",
                    "Evaluate if the formulation is mathematically sound, employing formalized "
                    "expressions and highlighting any gaps or inconsistencies.",
                    {"mathematical_rigor", "rigorous", "rigor"});
                add("Practical Feasibility",
                    "Determine whether the formulation is realistically executable with "
                    "limited computational resources and accessible data, noting any "
                    "implementation challenges.",
                    {"practical_feasibility", "practical", "feasibility"});
                break;
            case Stage::data_search:
                add("Data Quality",
                    "Examine whether the collected data is relevant, accurate, sufficient, "
                    "and properly organized.",
                    {"data_quality", "quality"});
                add("Data Reliability",
                    "Assess the trustworthiness of the data based on source credibility, "
                    "consistency, and potential biases.",
                    {"data_reliability", "reliability"});
                add("File Structure Completeness",
                    "Verify whether the required CSV and MD files have been correctly created "
                    "with appropriate content and structure.",
                    {"file_structure_completeness", "file_structure", "structure"});
                break;
            case Stage::model_implementation:
                add("Model Approach",
                    "Check if the modeling approach addresses all critical factors with "
                    "justified assumptions and includes quantitative sensitivity analysis.",
                    {"model_approach", "approach"});
                add("Model Implementation",
                    "Assess whether the code is clean, modular, efficient, reproducible, and "
                    "properly tested.",
                    {"model_implementation", "implementation"});
                add("Report Quality",
                    "Verify that the report is professional, follows the template, and "
                    "includes clear, well-labeled figures with proper interpretation.",
                    {"report_quality", "report"});
                break;
        }
        return set;
    }
};

// ---------------------------------------------------------------------------
// critiques
// ---------------------------------------------------------------------------

struct Critique {
    std::map<std::string, int> subscores; // rubric name -> 0..scale_max
    int overall = 0;                      // always the exact sum of subscores
    std::string feedback;
    std::vector<std::string> weaknesses;
    std::vector<std::string> recommendations;
    std::vector<std::string> next_steps;
    bool reported_overall_mismatch = false; // model's own sum disagreed

    json to_json() const {
        json scores = json::object();
        for (const auto& [name, value] : subscores) scores[name] = value;
        json j = {{"scores", scores}, {"overall", overall}};
        if (!feedback.empty()) j["feedback"] = feedback;
        if (!weaknesses.empty()) j["weaknesses"] = weaknesses;
        if (!recommendations.empty()) j["recommendations"] = recommendations;
        if (!next_steps.empty()) j["next_steps"] = next_steps;
        if (reported_overall_mismatch) j["reported_overall_mismatch"] = true;
        return j;
    }

    std::string feedback_text() const {
        std::ostringstream os;
        if (!feedback.empty()) os << feedback << '\n';
        auto section = [&](const char* title, const std::vector<std::string>& items) {
            if (items.empty()) return;
            os << title << ":\n";
            for (const auto& item : items) os << "- " << item << '\n';
        };
        section("Weaknesses", weaknesses);
        section("Recommendations", recommendations);
        section("Next steps", next_steps);
        return os.str();
    }
};

enum class Lineage { initial, refined, explored };

inline std::string_view lineage_name(Lineage l) {
    switch (l) {
        case Lineage::initial: return "Initial";
        case Lineage::refined: return "Refined";
        case Lineage::explored: return "Explored";
    }
    return "?";
}

struct Candidate {
    int id = 0;
    std::string body;
    std::optional<Critique> critique;
    int generation = 0;
    Lineage lineage = Lineage::initial;
    int parent_id = -1; // valid when lineage == refined
};

struct LoopConfig {
    int n = 3; // pool size
    int k = 1; // discard count, in [0, n-1]
    int M = 3; // refinement iterations
    bool explore_with_feedback = true;
    int scale_max = 5;

    void validate() const {
        if (n < 1) throw Error(Errc::invalid_config, "loop pool size n must be >= 1");
        if (k < 0 || k > n - 1)
            throw Error(Errc::invalid_config, "loop discard count k must be in [0, n-1]");
        if (M < 0) throw Error(Errc::invalid_config, "loop iteration count M must be >= 0");
    }
};

struct PoolState {
    int iteration = 0; // 0..M; state is recorded after scoring
    std::vector<Candidate> pool;
};

struct LoopResult {
    Candidate final;
    std::vector<PoolState> history;
};

// ---------------------------------------------------------------------------
// critique parsing
// ---------------------------------------------------------------------------

namespace detail {

// Maps a model JSON score key ("rigorous_score", "reliability_score", ...)
// onto a rubric by its alias stems.
inline const Rubric* match_rubric(const RubricSet& set, std::string key) {
    key = slugify(key);
    const std::string stem = key.rfind("_score") == key.size() - 6 && key.size() > 6
                                 ? key.substr(0, key.size() - 6)
                                 : key;
    for (const auto& rubric : set.rubrics) {
        if (slugify(rubric.name) == stem) return &rubric;
        for (const auto& alias : rubric.aliases)
            if (alias == stem) return &rubric;
    }
    // relaxed containment pass ("practical" in "practical_feasibility_score")
    for (const auto& rubric : set.rubrics)
        for (const auto& alias : rubric.aliases)
            if (stem.find(alias) != std::string::npos || alias.find(stem) != std::string::npos)
                return &rubric;
    return nullptr;
}

inline std::vector<std::string> string_list(const json& j, const char* key) {
    std::vector<std::string> out;
    if (!j.is_object() || !j.contains(key) || !j[key].is_array()) return out;
    for (const auto& item : j[key])
        if (item.is_string()) out.push_back(item.get<std::string>());
    return out;
}

} // namespace detail

// Builds a Critique from raw model output. The overall score is always
// recomputed locally; a differing model-reported overall_score is flagged,
// never trusted.
inline Critique parse_critique(const RubricSet& set, const std::string& model_output) {
    auto parsed = extract_json_object(model_output);
    if (!parsed) throw Error(Errc::unparseable_critique, "no JSON object in critique output");
    const json& j = *parsed;

    const json* scores = nullptr;
    if (j.contains("scores") && j["scores"].is_object()) scores = &j["scores"];
    else scores = &j;

    Critique critique;
    std::optional<int> reported_overall;
    std::vector<int> positional;
    for (auto it = scores->begin(); it != scores->end(); ++it) {
        if (!it.value().is_number()) continue;
        int value = static_cast<int>(std::lround(it.value().get<double>()));
        std::string key = slugify(it.key());
        if (key == "overall_score" || key == "overall") {
            reported_overall = value;
            continue;
        }
        if (const Rubric* rubric = detail::match_rubric(set, it.key())) {
            value = std::clamp(value, 0, rubric->scale_max);
            critique.subscores[rubric->name] = value;
        } else {
            positional.push_back(value);
        }
    }
    // positional fallback: unmatched numeric keys fill missing rubrics in order
    if (critique.subscores.size() < set.rubrics.size() && !positional.empty()) {
        size_t next = 0;
        for (const auto& rubric : set.rubrics) {
            if (critique.subscores.count(rubric.name)) continue;
            if (next >= positional.size()) break;
            critique.subscores[rubric.name] =
                std::clamp(positional[next++], 0, rubric.scale_max);
        }
    }
    if (critique.subscores.size() != set.rubrics.size())
        throw Error(Errc::unparseable_critique,
                    "expected " + std::to_string(set.rubrics.size()) + " subscores, got " +
                        std::to_string(critique.subscores.size()));

    critique.overall = 0;
    for (const auto& [name, value] : critique.subscores) critique.overall += value;
    if (reported_overall && *reported_overall != critique.overall)
        critique.reported_overall_mismatch = true;

    critique.weaknesses = detail::string_list(j, "weaknesses");
    critique.recommendations = detail::string_list(j, "recommendations");
    critique.next_steps = detail::string_list(j, "next_steps");
    std::ostringstream fb;
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (it.key().find("feedback") != std::string::npos && it.value().is_string())
            fb << it.key() << ": " << it.value().get<std::string>() << '\n';
    }
    critique.feedback = fb.str();
    return critique;
}

// ---------------------------------------------------------------------------
// critic
// ---------------------------------------------------------------------------

using CandidateGenerator = std::function<std::string(int index, const std::string& feedback_context)>;
using CandidateRefiner = std::function<std::string(const Candidate& candidate, const Critique& critique)>;

class Critic {
public:
    Critic(LlmGateway& gateway, const PromptLibrary& prompts, SharedMemory* memory = nullptr,
           ChatParams params = {})
        : gateway_(gateway), prompts_(prompts), memory_(memory), params_(std::move(params)) {}

    // Scores one candidate against the stage rubrics.
    Critique score(const Candidate& candidate, const RubricSet& set, const std::string& target) {
        if (trim(candidate.body).empty())
            throw Error(Errc::invalid_config, "cannot score an empty candidate body");
        std::ostringstream rubric_text;
        for (const auto& rubric : set.rubrics)
            rubric_text << "- " << rubric.name << " (0-" << rubric.scale_max
                        << "): " << rubric.description << '\n';
        std::ostringstream keys;
        for (const auto& rubric : set.rubrics) keys << '"' << slugify(rubric.name) << "_score\", ";
        ChatRequest req = ChatRequest::simple(
            prompts_.render("critic_score", {{"rubrics", rubric_text.str()},
                                             {"score_keys", keys.str()},
                                             {"stage", std::string(stage_name(set.stage))}}),
            "Target:\n" + target + "\n\nSolution under review:\n" + candidate.body, params_);

        std::string response = ask(req);
        Critique critique;
        try {
            critique = parse_critique(set, response);
        } catch (const Error& e) {
            if (e.code() != Errc::unparseable_critique) throw;
            // one reformat retry
            ChatRequest retry = req;
            retry.messages.push_back({ChatRole::assistant, response});
            retry.messages.push_back(
                {ChatRole::user,
                 "Your reply could not be parsed. Respond again with ONLY the JSON object in the "
                 "requested schema."});
            critique = parse_critique(set, ask(retry));
        }
        if (memory_) {
            if (critique.reported_overall_mismatch)
                memory_->put(AgentSource::critic,
                             std::string("critic.discrepancy.") + slugify(std::string(stage_name(set.stage))),
                             "model-reported overall_score differed from recomputed sum for candidate " +
                                 std::to_string(candidate.id));
            memory_->put(AgentSource::critic,
                         "critic." + slugify(std::string(stage_name(set.stage))) + ".critique",
                         critique.to_json().dump());
        }
        return critique;
    }

    // Algorithm: initialize n candidates; per iteration score all, drop the
    // bottom k, refine survivors with their feedback, explore k fresh
    // candidates; after M iterations score the final pool and return argmax.
    LoopResult run_loop(const LoopConfig& config, const std::string& target,
                        const CandidateGenerator& generator, const CandidateRefiner& refiner,
                        const RubricSet& rubric_set) {
        config.validate();
        LoopResult result;
        int next_id = 0;

        std::vector<Candidate> pool;
        for (int i = 0; i < config.n; ++i) {
            Candidate c;
            c.id = next_id++;
            c.body = generator(i, "");
            c.generation = 0;
            c.lineage = Lineage::initial;
            pool.push_back(std::move(c));
        }

        auto score_pool = [&](std::vector<Candidate>& candidates, int iteration) {
            for (auto& c : candidates)
                if (!c.critique) c.critique = score(c, rubric_set, target);
            PoolState state;
            state.iteration = iteration;
            state.pool = candidates;
            result.history.push_back(state);
            record_pool(rubric_set.stage, state);
        };

        auto by_score_desc = [](const Candidate& a, const Candidate& b) {
            int sa = a.critique ? a.critique->overall : -1;
            int sb = b.critique ? b.critique->overall : -1;
            if (sa != sb) return sa > sb;
            return a.id < b.id; // deterministic tie-break: earlier candidate survives
        };

        for (int m = 0; m < config.M; ++m) {
            score_pool(pool, m);
            std::sort(pool.begin(), pool.end(), by_score_desc);

            std::vector<Candidate> survivors(pool.begin(), pool.end() - config.k);
            std::vector<Candidate> discarded(pool.end() - config.k, pool.end());

            std::string feedback_context;
            if (config.explore_with_feedback && !discarded.empty()) {
                std::ostringstream os;
                os << "Critic feedback on discarded attempts:\n";
                for (const auto& c : discarded)
                    if (c.critique)
                        os << "- (scored " << c.critique->overall << ") "
                           << trim(c.critique->feedback_text()) << '\n';
                feedback_context = os.str();
            }

            std::vector<Candidate> next_pool;
            for (auto& survivor : survivors) {
                Candidate refined;
                refined.id = next_id++;
                refined.body = refiner(survivor, *survivor.critique);
                refined.generation = m + 1;
                refined.lineage = Lineage::refined;
                refined.parent_id = survivor.id;
                next_pool.push_back(std::move(refined));
            }
            for (int j = 0; j < config.k; ++j) {
                Candidate explored;
                explored.id = next_id++;
                explored.body = generator(config.n + j, feedback_context);
                explored.generation = m + 1;
                explored.lineage = Lineage::explored;
                next_pool.push_back(std::move(explored));
            }
            pool = std::move(next_pool);
        }

        score_pool(pool, config.M);
        auto best = std::min_element(pool.begin(), pool.end(), [&](const Candidate& a, const Candidate& b) {
            return by_score_desc(a, b);
        });
        result.final = *best;
        if (memory_)
            memory_->put(AgentSource::critic,
                         "critic." + slugify(std::string(stage_name(rubric_set.stage))) + ".final",
                         json({{"candidate_id", result.final.id},
                               {"overall", result.final.critique ? result.final.critique->overall : -1}})
                             .dump());
        return result;
    }

private:
    std::string ask(const ChatRequest& req) {
        try {
            return gateway_.complete(req);
        } catch (const Error& e) {
            if (e.code() == Errc::replay_miss || e.code() == Errc::provider_error)
                throw Error(Errc::gateway_error, e.what());
            throw;
        }
    }

    void record_pool(Stage stage, const PoolState& state) {
        if (!memory_) return;
        json pool = json::array();
        for (const auto& c : state.pool) {
            pool.push_back({{"id", c.id},
                            {"generation", c.generation},
                            {"lineage", std::string(lineage_name(c.lineage))},
                            {"parent_id", c.parent_id},
                            {"overall", c.critique ? c.critique->overall : -1},
                            {"body", c.body}});
        }
        memory_->put(AgentSource::critic,
                     "critic." + slugify(std::string(stage_name(stage))) + ".round",
                     json({{"iteration", state.iteration}, {"pool", pool}}).dump());
    }

    LlmGateway& gateway_;
    const PromptLibrary& prompts_;
    SharedMemory* memory_;
    ChatParams params_;
};

} // namespace mmk
