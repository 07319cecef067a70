#include "harmonia/errors.hpp"

namespace harmonia {

std::string_view error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::internal: return "INTERNAL";
        case ErrorCode::io: return "IO";
        case ErrorCode::config: return "CONFIG";
        case ErrorCode::image_decode: return "IMAGE_DECODE";
        case ErrorCode::mask_shape: return "MASK_SHAPE";
        case ErrorCode::degenerate_mask: return "DEGENERATE_MASK";
        case ErrorCode::mask_overlap: return "MASK_OVERLAP";
        case ErrorCode::description_parse: return "DESCRIPTION_PARSE";
        case ErrorCode::provider_unavailable: return "PROVIDER_UNAVAILABLE";
        case ErrorCode::backend_unavailable: return "BACKEND_UNAVAILABLE";
        case ErrorCode::backend_numerics: return "BACKEND_NUMERICS";
        case ErrorCode::degenerate_attention: return "DEGENERATE_ATTENTION";
        case ErrorCode::refinement_diverged: return "REFINEMENT_DIVERGED";
        case ErrorCode::no_condition_tokens: return "NO_CONDITION_TOKENS";
        case ErrorCode::length_mismatch: return "LENGTH_MISMATCH";
        case ErrorCode::record_mismatch: return "RECORD_MISMATCH";
        case ErrorCode::evaluator_unavailable: return "EVALUATOR_UNAVAILABLE";
        case ErrorCode::label_degeneracy: return "LABEL_DEGENERACY";
        case ErrorCode::iteration_failed: return "ITERATION_FAILED";
    }
    return "INTERNAL";
}

}  // namespace harmonia
