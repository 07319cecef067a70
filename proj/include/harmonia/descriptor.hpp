#pragma once

#include "harmonia/imagecore.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace harmonia {

/// (object words, foreground-condition words, background-condition words).
struct ConditionDescription {
    static constexpr std::size_t kMaxWordsPerField = 4;

    std::vector<std::string> object_words;
    std::vector<std::string> fore_condition;
    std::vector<std::string> back_condition;
    std::string provider_id;
    std::string raw_response;

    /// Canonical labeled line: `object: dog | foreground: overbright | background: dusky warm`.
    std::string format() const;
    /// True when the three word lists match (provenance is ignored).
    bool same_words(const ConditionDescription& other) const;
};

struct PromptConfig {
    /// Allowed vocabulary scope for the condition phrases.
    std::vector<std::string> scope{"weather", "season", "time", "color tone"};
};

std::string build_task_prompt(const PromptConfig& config = {});

/// Accepts labeled lines, JSON objects/arrays, bare comma triples and a few
/// prose patterns. Throws DescriptionParseError when a field is missing.
ConditionDescription parse_vlm_response(std::string_view raw);

/// Lowercases, strips punctuation, drops non-alphabetic tokens and caps the
/// list at kMaxWordsPerField.
std::vector<std::string> normalize_words(std::string_view phrase);

class DescriptionProvider {
public:
    virtual ~DescriptionProvider() = default;
    virtual std::string id() const = 0;
    /// Returns k raw responses. May throw on transport failure.
    virtual std::vector<std::string> describe(const std::string& task_prompt, const RasterImage& image,
                                              const ForegroundMask& mask, int k) = 0;
};

/// File-backed provider for tests and offline runs. Each call hands out the
/// next k lines, starting from an offset derived from the seed.
class ScriptedProvider final : public DescriptionProvider {
public:
    ScriptedProvider(std::vector<std::string> responses, std::uint64_t seed = 0);
    static ScriptedProvider from_file(const std::filesystem::path& path, std::uint64_t seed = 0);

    std::string id() const override { return "scripted"; }
    std::vector<std::string> describe(const std::string& task_prompt, const RasterImage& image,
                                      const ForegroundMask& mask, int k) override;

    std::size_t calls() const noexcept { return calls_; }

private:
    std::vector<std::string> responses_;
    std::size_t cursor_ = 0;
    std::size_t calls_ = 0;
};

enum class HttpProviderFormat { generic, gemini };

struct HttpProviderConfig {
    std::string endpoint;  // scheme://host[:port]/path
    std::string api_key;   // sent as header; never logged
    HttpProviderFormat format = HttpProviderFormat::generic;
    std::string model;     // passed through for the generic format
    double timeout_s = 60.0;

    /// Reads HARMONIA_VLM_ENDPOINT, HARMONIA_VLM_API_KEY, HARMONIA_VLM_FORMAT, HARMONIA_VLM_MODEL.
    static HttpProviderConfig from_env();
};

/// Talks to a remote vision-language service.
///
/// generic: POST {prompt, image_png_b64, mask_png_b64, k, model} -> {"responses": [...]}
/// gemini:  one generateContent call per response; text taken from
///          candidates[0].content.parts[*].text.
class HttpProvider final : public DescriptionProvider {
public:
    explicit HttpProvider(HttpProviderConfig config);

    std::string id() const override;
    std::vector<std::string> describe(const std::string& task_prompt, const RasterImage& image,
                                      const ForegroundMask& mask, int k) override;

private:
    HttpProviderConfig config_;
};

struct GenerateOptions {
    int k = 3;
    int max_attempts = 3;  // provider failures tolerated before ProviderUnavailable
    PromptConfig prompt;
};

/// Calls the provider, parses each response and re-requests duplicates or
/// unparseable slots once. Throws ProviderUnavailable / DescriptionParseError.
std::vector<ConditionDescription> generate_descriptions(const CompositeCase& composite,
                                                        DescriptionProvider& provider,
                                                        const GenerateOptions& options = {});

}  // namespace harmonia
