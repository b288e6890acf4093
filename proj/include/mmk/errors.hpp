#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mmk {

// Every failure mode the library reports deliberately. Tool execution wraps
// these into ToolResult instead of letting them escape the dispatch loop.
enum class Errc {
    // bench
    missing_manifest,
    schema_violation,
    dangling_attachment,
    unparseable_rating,
    // memory
    key_not_found,
    corrupt_archive,
    // gateway
    provider_error,
    replay_miss,
    budget_exceeded,
    gateway_error,
    // sandbox / tools
    not_found,
    path_escape,
    unsupported_format,
    read_only_violation,
    unsupported_archive,
    malformed_archive,
    external_helper_missing,
    http_error,
    size_cap_exceeded,
    non_html_content,
    backend_unconfigured,
    backend_error,
    malformed_pdf,
    page_out_of_range,
    timeout,
    interpreter_missing,
    unparseable,
    multiple_tools_selected,
    params_without_use,
    // critic
    unparseable_critique,
    // agents
    empty_decomposition,
    step_budget_exhausted,
    artifact_invalid,
    missing_stage,
    // judge
    unparseable_roles,
    unparseable_assessment,
    unparseable_score,
    arity_mismatch,
    // orchestration / misc
    invalid_config,
    io_error,
};

inline std::string_view errc_name(Errc c) {
    switch (c) {
        case Errc::missing_manifest: return "MissingManifest";
        case Errc::schema_violation: return "SchemaViolation";
        case Errc::dangling_attachment: return "DanglingAttachment";
        case Errc::unparseable_rating: return "UnparseableRating";
        case Errc::key_not_found: return "KeyNotFound";
        case Errc::corrupt_archive: return "CorruptArchive";
        case Errc::provider_error: return "ProviderError";
        case Errc::replay_miss: return "ReplayMiss";
        case Errc::budget_exceeded: return "BudgetExceeded";
        case Errc::gateway_error: return "GatewayError";
        case Errc::not_found: return "NotFound";
        case Errc::path_escape: return "PathEscape";
        case Errc::unsupported_format: return "UnsupportedFormat";
        case Errc::read_only_violation: return "ReadOnlyViolation";
        case Errc::unsupported_archive: return "UnsupportedArchive";
        case Errc::malformed_archive: return "MalformedArchive";
        case Errc::external_helper_missing: return "ExternalHelperMissing";
        case Errc::http_error: return "HttpError";
        case Errc::size_cap_exceeded: return "SizeCapExceeded";
        case Errc::non_html_content: return "NonHtmlContent";
        case Errc::backend_unconfigured: return "BackendUnconfigured";
        case Errc::backend_error: return "BackendError";
        case Errc::malformed_pdf: return "MalformedPdf";
        case Errc::page_out_of_range: return "PageOutOfRange";
        case Errc::timeout: return "Timeout";
        case Errc::interpreter_missing: return "InterpreterMissing";
        case Errc::unparseable: return "Unparseable";
        case Errc::multiple_tools_selected: return "MultipleToolsSelected";
        case Errc::params_without_use: return "ParamsWithoutUse";
        case Errc::unparseable_critique: return "UnparseableCritique";
        case Errc::empty_decomposition: return "EmptyDecomposition";
        case Errc::step_budget_exhausted: return "StepBudgetExhausted";
        case Errc::artifact_invalid: return "ArtifactInvalid";
        case Errc::missing_stage: return "MissingStage";
        case Errc::unparseable_roles: return "UnparseableRoles";
        case Errc::unparseable_assessment: return "UnparseableAssessment";
        case Errc::unparseable_score: return "UnparseableScore";
        case Errc::arity_mismatch: return "ArityMismatch";
        case Errc::invalid_config: return "InvalidConfig";
        case Errc::io_error: return "IoError";
    }
    return "UnknownError";
}

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& message)
        : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

} // namespace mmk
