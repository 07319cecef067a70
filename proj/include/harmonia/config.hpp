#pragma once

#include "harmonia/descriptor.hpp"
#include "harmonia/diffusion/backend.hpp"
#include "harmonia/evaluate.hpp"
#include "harmonia/harmonize.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace harmonia {

struct ProviderSettings {
    std::string kind = "http";  // http | gemini | scripted
    std::vector<std::string> responses;
    std::filesystem::path responses_file;
    std::string endpoint;  // empty: HARMONIA_VLM_ENDPOINT
    std::string model;
    double timeout_s = 60.0;
};

struct EvaluatorSettings {
    std::string kind = "model";  // model | scripted | none
    std::filesystem::path model;
    std::vector<double> scores;
    std::filesystem::path scores_file;
};

/// Fully resolved configuration of one run.
struct HarmoniaConfig {
    std::uint64_t seed = 0;
    diffusion::BackendConfig backend;
    ProviderSettings provider;
    EvaluatorSettings evaluator;
    RunConfig run;
    bool painterly = false;
    nlohmann::json resolved;  // the merged document this was read from

    /// Iteration settings with the seed and painterly mode applied.
    RunConfig run_config() const;
};

/// Every key with its default value.
nlohmann::json default_config_json();

/// Recursive merge: objects merge key by key, anything else replaces.
nlohmann::json merge_config(nlohmann::json base, const nlohmann::json& overlay);

/// Reads a JSON config file; relative paths inside resolve against its directory.
nlohmann::json load_config_file(const std::filesystem::path& path);

/// "a.b.c=value" -> {"a":{"b":{"c":value}}}; value parsed as JSON, else taken as a string.
nlohmann::json parse_override(const std::string& assignment);

/// defaults <- HARMONIA_BACKEND_WEIGHTS <- layers, in order. Unknown keys,
/// wrong types and out-of-range values throw ConfigError.
HarmoniaConfig resolve_config(const std::vector<nlohmann::json>& layers);

std::unique_ptr<DescriptionProvider> make_provider(const HarmoniaConfig& cfg);

/// nullptr for kind "none". A model that cannot be loaded also yields
/// nullptr, with a warning appended.
std::unique_ptr<HarmonyEvaluator> make_evaluator(const HarmoniaConfig& cfg, std::vector<std::string>& warnings);

}  // namespace harmonia
