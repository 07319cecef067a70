#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace harmonia {

enum class ErrorCode {
    internal,
    io,
    config,
    image_decode,
    mask_shape,
    degenerate_mask,
    mask_overlap,
    description_parse,
    provider_unavailable,
    backend_unavailable,
    backend_numerics,
    degenerate_attention,
    refinement_diverged,
    no_condition_tokens,
    length_mismatch,
    record_mismatch,
    evaluator_unavailable,
    label_degeneracy,
    iteration_failed,
};

/// Stable machine-readable name, e.g. "MASK_SHAPE". Used by the HTTP API.
std::string_view error_code_name(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

template <ErrorCode C>
class CodedError : public Error {
public:
    explicit CodedError(const std::string& message) : Error(C, message) {}
};

using IoError = CodedError<ErrorCode::io>;
using ConfigError = CodedError<ErrorCode::config>;
using ImageDecodeError = CodedError<ErrorCode::image_decode>;
using MaskShapeError = CodedError<ErrorCode::mask_shape>;
using DegenerateMaskError = CodedError<ErrorCode::degenerate_mask>;
using MaskOverlapError = CodedError<ErrorCode::mask_overlap>;
using ProviderUnavailable = CodedError<ErrorCode::provider_unavailable>;
using BackendUnavailable = CodedError<ErrorCode::backend_unavailable>;
using BackendNumericsError = CodedError<ErrorCode::backend_numerics>;
using DegenerateAttentionError = CodedError<ErrorCode::degenerate_attention>;
using NoConditionTokens = CodedError<ErrorCode::no_condition_tokens>;
using LengthMismatchError = CodedError<ErrorCode::length_mismatch>;
using RecordMismatchError = CodedError<ErrorCode::record_mismatch>;
using EvaluatorUnavailable = CodedError<ErrorCode::evaluator_unavailable>;
using LabelDegeneracyError = CodedError<ErrorCode::label_degeneracy>;

/// Carries the offending provider text so callers can log or show it.
class DescriptionParseError : public Error {
public:
    DescriptionParseError(const std::string& message, std::string raw)
        : Error(ErrorCode::description_parse, message), raw_(std::move(raw)) {}

    const std::string& raw() const noexcept { return raw_; }

private:
    std::string raw_;
};

/// Raised by a harmonization iteration; `stage()` names the failing step.
class IterationFailed : public Error {
public:
    IterationFailed(std::string stage, const std::string& message, ErrorCode cause)
        : Error(ErrorCode::iteration_failed, stage + ": " + message),
          stage_(std::move(stage)),
          cause_(cause) {}

    const std::string& stage() const noexcept { return stage_; }
    ErrorCode cause() const noexcept { return cause_; }

private:
    std::string stage_;
    ErrorCode cause_;
};

}  // namespace harmonia
