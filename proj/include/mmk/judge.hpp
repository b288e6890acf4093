#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mmk/bench.hpp"
#include "mmk/errors.hpp"
#include "mmk/gateway.hpp"
#include "mmk/prompts.hpp"
#include "mmk/util.hpp"

namespace mmk {

// ---------------------------------------------------------------------------
// expert roles
// ---------------------------------------------------------------------------

enum class RoleOrigin { fixed_math_modeling, fixed_data_analysis, domain_selected };

struct ExpertRole {
    std::string name;
    std::string description;
    RoleOrigin origin = RoleOrigin::domain_selected;
};

inline ExpertRole math_modeling_expert() {
    return {"Mathematical Modeling Expert",
            "You are a mathematical modeling expert with extensive experience judging modeling "
            "contests. You focus on the rigor of model construction, the soundness of "
            "assumptions, and whether the mathematical machinery genuinely fits the problem.",
            RoleOrigin::fixed_math_modeling};
}

inline ExpertRole data_analysis_expert() {
    return {"Data Analysis Expert",
            "You are a data analysis expert. You focus on the authenticity and adequacy of the "
            "data used, the quality of data processing, and whether the quantitative analysis "
            "supports the conclusions drawn.",
            RoleOrigin::fixed_data_analysis};
}

// ---------------------------------------------------------------------------
// metrics, aspects and cap rules
// ---------------------------------------------------------------------------

enum class QualityMetric {
    modeling_groundedness,
    data_groundedness,
    analysis_groundedness,
    innovativeness,
};

inline std::string_view metric_name(QualityMetric m) {
    switch (m) {
        case QualityMetric::modeling_groundedness: return "ModelingGroundedness";
        case QualityMetric::data_groundedness: return "DataGroundedness";
        case QualityMetric::analysis_groundedness: return "AnalysisGroundedness";
        case QualityMetric::innovativeness: return "Innovativeness";
    }
    return "?";
}

inline const std::array<QualityMetric, 4>& quality_metrics() {
    static const std::array<QualityMetric, 4> all = {
        QualityMetric::modeling_groundedness,
        QualityMetric::data_groundedness,
        QualityMetric::analysis_groundedness,
        QualityMetric::innovativeness,
    };
    return all;
}

inline const char* metric_prompt_name(QualityMetric m) {
    switch (m) {
        case QualityMetric::modeling_groundedness: return "judge_modeling";
        case QualityMetric::data_groundedness: return "judge_data";
        case QualityMetric::analysis_groundedness: return "judge_analysis";
        case QualityMetric::innovativeness: return "judge_innovation";
    }
    return "";
}

// The five named rubric aspects per metric, in prompt order.
inline const std::vector<std::string>& metric_aspects(QualityMetric m) {
    static const std::map<QualityMetric, std::vector<std::string>> aspects = {
        {QualityMetric::modeling_groundedness,
         {"Mathematical Foundation", "Real-World Integration", "Technical Sophistication",
          "Validation Approach", "Implementation Quality"}},
        {QualityMetric::data_groundedness,
         {"Data Quality", "Data Processing", "Statistical Analysis", "Data Integration",
          "Validation & Testing"}},
        {QualityMetric::analysis_groundedness,
         {"Analytical Depth", "Mathematical Rigor", "Results Interpretation", "Critical Analysis",
          "Future Implications"}},
        {QualityMetric::innovativeness,
         {"Methodological Innovation", "Problem Framing", "Solution Creativity",
          "Technical Advancement", "Impact Potential"}},
    };
    return aspects.at(m);
}

// A deficiency clause from a rubric's scoring rules. The judge model reports
// the trigger as a named boolean; enforcement is mechanical.
struct CapRule {
    std::string id;          // trigger key in the judge output schema
    std::string clause;      // rule text shown to the judge
    bool aspect_level = false;
    std::string aspect_name; // set when aspect_level
    double cap = 1.0;        // clamp value on the 0..1 scale
};

inline const std::vector<CapRule>& metric_cap_rules(QualityMetric m) {
    static const std::map<QualityMetric, std::vector<CapRule>> rules = {
        {QualityMetric::modeling_groundedness,
         {
             {"missing_critical_element", "Missing any critical element caps score at 0.25", false, "", 0.25},
             {"lack_of_validation", "Lack of validation caps overall score at 0.50", false, "", 0.50},
             {"surface_level_treatment", "Surface-level treatment caps score at 0.25", false, "", 0.25},
         }},
        {QualityMetric::data_groundedness,
         {
             {"missing_source_documentation", "Missing data source documentation caps score at 0.25", false, "", 0.25},
             {"no_data_processing", "No data processing caps score at 0.25", false, "", 0.25},
             {"no_validation", "No validation caps overall score at 0.50", false, "", 0.50},
         }},
        {QualityMetric::analysis_groundedness,
         {
             {"no_mathematical_justification", "No mathematical justification caps score at 0.25", false, "", 0.25},
             {"missing_critical_analysis", "Missing critical analysis caps score at 0.50", false, "", 0.50},
         }},
        {QualityMetric::innovativeness,
         {
             {"only_standard_methods", "Using only standard methods caps score at 0.25", false, "", 0.25},
             {"novelty_unjustified", "Lack of justification for novelty caps score at 0.50", false, "", 0.50},
             {"innovation_without_validation", "Innovation without proper validation caps at 0.25", false, "", 0.25},
         }},
    };
    return rules.at(m);
}

// ---------------------------------------------------------------------------
// assessments
// ---------------------------------------------------------------------------

struct AspectScore {
    std::string aspect;
    double value = 0.0; // one of 0.00 / 0.25 / 0.50 / 0.75 / 1.00 after snapping
};

// Off-grid judge values are snapped to the nearest rubric level; the delta is
// kept for the audit trail rather than rejected.
inline double snap_to_level(double value, double* delta = nullptr) {
    double clamped = std::clamp(value, 0.0, 1.0);
    double snapped = std::round(clamped * 4.0) / 4.0;
    if (delta) *delta = snapped - value;
    return snapped;
}

struct QualityAssessment {
    QualityMetric metric{};
    ExpertRole role;
    std::vector<AspectScore> aspects; // exactly 5
    std::vector<std::string> caps_triggered;
    double metric_score = 0.0; // [0,100]
    std::map<std::string, double> snap_deltas;

    json to_json() const {
        json a = json::object();
        for (const auto& s : aspects) a[s.aspect] = s.value;
        json j = {{"metric", std::string(metric_name(metric))},
                  {"role", role.name},
                  {"aspects", a},
                  {"caps_triggered", caps_triggered},
                  {"metric_score", metric_score}};
        if (!snap_deltas.empty()) {
            json d = json::object();
            for (const auto& [k, v] : snap_deltas) d[k] = v;
            j["snap_deltas"] = d;
        }
        return j;
    }
};

// Mechanical scoring: aspect-level caps clamp their aspect, overall caps clamp
// the mean, then scale to 0..100. Caps can only ever lower a score.
inline double apply_caps_and_score(QualityMetric metric, std::vector<AspectScore>& aspects,
                                   const std::vector<std::string>& triggered) {
    const auto& rules = metric_cap_rules(metric);
    auto rule_for = [&](const std::string& id) -> const CapRule* {
        for (const auto& r : rules)
            if (r.id == id) return &r;
        return nullptr;
    };
    for (const auto& id : triggered) {
        const CapRule* rule = rule_for(id);
        if (!rule || !rule->aspect_level) continue;
        for (auto& aspect : aspects)
            if (aspect.aspect == rule->aspect_name) aspect.value = std::min(aspect.value, rule->cap);
    }
    double mean = 0.0;
    for (const auto& aspect : aspects) mean += aspect.value;
    mean /= aspects.empty() ? 1.0 : static_cast<double>(aspects.size());
    for (const auto& id : triggered) {
        const CapRule* rule = rule_for(id);
        if (!rule || rule->aspect_level) continue;
        mean = std::min(mean, rule->cap);
    }
    return mean * 100.0;
}

// ---------------------------------------------------------------------------
// scorecard
// ---------------------------------------------------------------------------

struct Scorecard {
    double structural_coherency = 0.0;
    double solution_completeness = 0.0;
    std::map<QualityMetric, double> quality;           // role-averaged
    std::map<QualityMetric, std::vector<double>> per_role;
    std::vector<std::string> role_names;
    std::vector<QualityAssessment> assessments;
    double final_score = 0.0;

    // final must always be recomputable from the six stored metrics
    double recompute_final() const {
        double sum = structural_coherency + solution_completeness;
        for (const auto& m : quality_metrics()) sum += quality.at(m);
        return sum / 6.0;
    }

    json to_json() const {
        json q = json::object();
        json pr = json::object();
        for (const auto& m : quality_metrics()) {
            q[std::string(metric_name(m))] = quality.at(m);
            pr[std::string(metric_name(m))] = per_role.at(m);
        }
        json a = json::array();
        for (const auto& assessment : assessments) a.push_back(assessment.to_json());
        return json{{"structural_coherency", structural_coherency},
                    {"solution_completeness", solution_completeness},
                    {"quality", q},
                    {"per_role", pr},
                    {"roles", role_names},
                    {"assessments", a},
                    {"final", final_score}};
    }
};

// Pure arithmetic join of the judged pieces; quality metric = mean over the
// four roles, final = mean of the six metric values.
inline Scorecard aggregate_scorecard(double coherency, double completeness,
                                     const std::map<QualityMetric, std::vector<double>>& quality_by_role) {
    Scorecard card;
    card.structural_coherency = coherency;
    card.solution_completeness = completeness;
    for (const auto& m : quality_metrics()) {
        auto it = quality_by_role.find(m);
        if (it == quality_by_role.end() || it->second.size() != 4)
            throw Error(Errc::arity_mismatch,
                        std::string(metric_name(m)) + " needs exactly 4 role scores");
        double sum = 0.0;
        for (double v : it->second) sum += v;
        card.per_role[m] = it->second;
        card.quality[m] = sum / 4.0;
    }
    card.final_score = card.recompute_final();
    return card;
}

// ---------------------------------------------------------------------------
// judge operations
// ---------------------------------------------------------------------------

struct JudgeConfig {
    ChatParams params;
    int parse_retries = 1;
};

class Judge {
public:
    Judge(LlmGateway& gateway, const PromptLibrary& prompts, JudgeConfig cfg = {})
        : gateway_(gateway), prompts_(prompts), cfg_(std::move(cfg)) {}

    // Two fixed roles plus two domain roles picked from the problem context.
    std::vector<ExpertRole> select_expert_roles(const Problem& problem) {
        std::ostringstream user;
        user << "Problem title: " << problem.title << "\n";
        if (!problem.domain_tags.empty()) {
            user << "Domain tags: ";
            for (size_t i = 0; i < problem.domain_tags.size(); ++i)
                user << (i ? ", " : "") << problem.domain_tags[i];
            user << "\n";
        }
        user << "\nProblem statement:\n" << problem.statement;
        ChatRequest req =
            ChatRequest::simple(prompts_.render("judge_role_selection"), user.str(), cfg_.params);
        std::string response = ask(req);

        auto parsed = extract_json_object(response);
        std::vector<ExpertRole> domain_roles;
        if (parsed && parsed->contains("roles") && (*parsed)["roles"].is_array()) {
            for (const auto& r : (*parsed)["roles"]) {
                if (!r.is_object() || !r.contains("name") || !r.contains("description")) continue;
                domain_roles.push_back({r["name"].get<std::string>(),
                                        r["description"].get<std::string>(),
                                        RoleOrigin::domain_selected});
            }
        }
        if (domain_roles.size() < 2)
            throw Error(Errc::unparseable_roles,
                        "expected 2 domain expert roles, parsed " +
                            std::to_string(domain_roles.size()));
        domain_roles.resize(2);
        std::vector<ExpertRole> roles = {math_modeling_expert(), data_analysis_expert()};
        roles.insert(roles.end(), domain_roles.begin(), domain_roles.end());
        return roles;
    }

    // One quality metric under one expert role: verbatim rubric prompt,
    // parsed aspects snapped to the rubric levels, caps applied mechanically.
    QualityAssessment judge_quality(const std::string& report, const ExpertRole& role,
                                    QualityMetric metric) {
        if (trim(report).empty())
            throw Error(Errc::invalid_config, "cannot judge an empty report");
        const auto& aspect_names = metric_aspects(metric);
        const auto& rules = metric_cap_rules(metric);

        std::ostringstream schema;
        schema << "{\n  \"aspects\": {";
        for (size_t i = 0; i < aspect_names.size(); ++i)
            schema << (i ? ", " : "") << '"' << aspect_names[i] << "\": <0.00|0.25|0.50|0.75|1.00>";
        schema << "},\n  \"caps\": {";
        for (size_t i = 0; i < rules.size(); ++i)
            schema << (i ? ", " : "") << '"' << rules[i].id << "\": <true|false>";
        schema << "},\n  \"justification\": \"<one short paragraph>\"\n}";

        std::string system = prompts_.render(metric_prompt_name(metric),
                                             {{"expert_role_description", role.description}});
        system += "\n\nReturn your assessment as a single JSON object in exactly this schema:\n" +
                  schema.str();

        ChatRequest req = ChatRequest::simple(system, "Report to evaluate:\n\n" + report, cfg_.params);

        std::string response = ask(req);
        for (int attempt = 0;; ++attempt) {
            try {
                return parse_assessment(metric, role, response);
            } catch (const Error& e) {
                if (e.code() != Errc::unparseable_assessment || attempt >= cfg_.parse_retries) throw;
                ChatRequest retry = req;
                retry.messages.push_back({ChatRole::assistant, response});
                retry.messages.push_back({ChatRole::user,
                                          "Your reply could not be parsed. Respond with ONLY the JSON "
                                          "object in the requested schema."});
                response = ask(retry);
            }
        }
    }

    // Structural coherency / solution completeness under a single judge.
    double judge_objective(const std::string& report, const Problem& problem, bool coherency) {
        if (trim(report).empty())
            throw Error(Errc::invalid_config, "cannot judge an empty report");
        std::ostringstream user;
        user << "Problem statement:\n" << problem.statement << "\n\n";
        if (!problem.subtasks.empty()) {
            user << "Stated subtasks:\n";
            for (size_t i = 0; i < problem.subtasks.size(); ++i)
                user << (i + 1) << ". " << problem.subtasks[i] << '\n';
            user << '\n';
        }
        user << "Report to evaluate:\n\n" << report;
        ChatRequest req = ChatRequest::simple(
            prompts_.render(coherency ? "judge_structural_coherency" : "judge_solution_completeness"),
            user.str(), cfg_.params);
        std::string response = ask(req);

        auto parsed = extract_json_object(response);
        std::optional<double> score;
        if (parsed && parsed->contains("score") && (*parsed)["score"].is_number())
            score = (*parsed)["score"].get<double>();
        if (!score) {
            // fall back to the first number in the text
            const std::string& text = response;
            for (size_t i = 0; i < text.size(); ++i) {
                if (std::isdigit(static_cast<unsigned char>(text[i]))) {
                    try {
                        score = std::stod(text.substr(i));
                    } catch (...) {
                    }
                    break;
                }
            }
        }
        if (!score) throw Error(Errc::unparseable_score, "no numeric score in judge output");
        if (*score < 0.0 || *score > 100.0) *score = std::clamp(*score, 0.0, 100.0);
        return *score;
    }

    // Full pipeline: roles, 4x4 quality assessments, two objective metrics.
    Scorecard judge_report(const std::string& report, const Problem& problem) {
        std::vector<ExpertRole> roles = select_expert_roles(problem);
        std::map<QualityMetric, std::vector<double>> by_role;
        std::vector<QualityAssessment> assessments;
        for (const auto& metric : quality_metrics()) {
            for (const auto& role : roles) {
                QualityAssessment qa = judge_quality(report, role, metric);
                by_role[metric].push_back(qa.metric_score);
                assessments.push_back(std::move(qa));
            }
        }
        double coherency = judge_objective(report, problem, true);
        double completeness = judge_objective(report, problem, false);
        Scorecard card = aggregate_scorecard(coherency, completeness, by_role);
        for (const auto& role : roles) card.role_names.push_back(role.name);
        card.assessments = std::move(assessments);
        return card;
    }

private:
    QualityAssessment parse_assessment(QualityMetric metric, const ExpertRole& role,
                                       const std::string& response) {
        auto parsed = extract_json_object(response);
        if (!parsed) throw Error(Errc::unparseable_assessment, "no JSON object in judge output");
        const json& j = *parsed;
        const json* aspect_obj = nullptr;
        if (j.contains("aspects") && j["aspects"].is_object()) aspect_obj = &j["aspects"];
        else aspect_obj = &j;

        QualityAssessment qa;
        qa.metric = metric;
        qa.role = role;
        const auto& names = metric_aspects(metric);
        std::vector<double> positional;
        std::map<std::string, double> by_slug;
        for (auto it = aspect_obj->begin(); it != aspect_obj->end(); ++it) {
            if (!it.value().is_number()) continue;
            by_slug[slugify(it.key())] = it.value().get<double>();
        }
        for (const auto& name : names) {
            auto it = by_slug.find(slugify(name));
            if (it == by_slug.end()) continue;
            double delta = 0.0;
            double snapped = snap_to_level(it->second, &delta);
            if (std::abs(delta) > 1e-9) qa.snap_deltas[name] = delta;
            qa.aspects.push_back({name, snapped});
        }
        if (qa.aspects.size() != names.size())
            throw Error(Errc::unparseable_assessment,
                        "expected " + std::to_string(names.size()) + " aspect values, got " +
                            std::to_string(qa.aspects.size()));

        if (j.contains("caps") && j["caps"].is_object()) {
            for (const auto& rule : metric_cap_rules(metric)) {
                auto it = j["caps"].find(rule.id);
                if (it != j["caps"].end() && it->is_boolean() && it->get<bool>())
                    qa.caps_triggered.push_back(rule.id);
            }
        }
        qa.metric_score = apply_caps_and_score(metric, qa.aspects, qa.caps_triggered);
        return qa;
    }

    std::string ask(const ChatRequest& req) {
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
    JudgeConfig cfg_;
};

} // namespace mmk
