#include "harmonia/descriptor.hpp"

#include "base64.hpp"
#include "harmonia/errors.hpp"

#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <regex>
#include <sstream>

namespace harmonia {

namespace {

using nlohmann::json;

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

std::string join(const std::vector<std::string>& words, const char* sep = " ") {
    std::string out;
    for (const auto& w : words) {
        if (!out.empty()) {
            out += sep;
        }
        out += w;
    }
    return out;
}

bool is_stopword(const std::string& w) {
    static const char* const kStop[] = {"a", "an", "the", "and", "of", "with", "in", "is"};
    return std::find(std::begin(kStop), std::end(kStop), w) != std::end(kStop);
}

struct RawTriple {
    std::string object, fore, back;
};

ConditionDescription finish(const RawTriple& t, std::string_view raw) {
    ConditionDescription d;
    d.object_words = normalize_words(t.object);
    d.fore_condition = normalize_words(t.fore);
    d.back_condition = normalize_words(t.back);
    d.raw_response = std::string(raw);
    if (d.object_words.empty() || d.fore_condition.empty() || d.back_condition.empty()) {
        throw DescriptionParseError("response is missing the object, foreground or background field",
                                    std::string(raw));
    }
    return d;
}

// -- JSON-ish ------------------------------------------------------------------

std::string json_field_text(const json& v) {
    if (v.is_string()) {
        return v.get<std::string>();
    }
    if (v.is_array()) {
        std::string out;
        for (const auto& e : v) {
            if (e.is_string()) {
                out += (out.empty() ? "" : " ") + e.get<std::string>();
            }
        }
        return out;
    }
    return {};
}

enum class Field { none, object, fore, back };

Field classify_label(std::string label) {
    label = lower(label);
    std::string squashed;
    for (char c : label) {
        if (std::isalpha(static_cast<unsigned char>(c))) {
            squashed += c;
        }
    }
    if (squashed.starts_with("pobj") || squashed.starts_with("obj") || squashed == "name" ||
        squashed == "objectname" || squashed == "subject") {
        return Field::object;
    }
    if (squashed.starts_with("pfore") || squashed.starts_with("fore") || squashed.starts_with("foreground")) {
        return Field::fore;
    }
    if (squashed.starts_with("pback") || squashed.starts_with("back") || squashed.starts_with("background")) {
        return Field::back;
    }
    return Field::none;
}

std::optional<RawTriple> from_json(const json& j) {
    if (j.is_object()) {
        RawTriple t;
        for (const auto& [key, value] : j.items()) {
            switch (classify_label(key)) {
                case Field::object: t.object = json_field_text(value); break;
                case Field::fore: t.fore = json_field_text(value); break;
                case Field::back: t.back = json_field_text(value); break;
                case Field::none: break;
            }
        }
        return t;
    }
    if (j.is_array()) {
        if (j.size() == 1 && (j[0].is_array() || j[0].is_object())) {
            return from_json(j[0]);
        }
        if (j.size() == 3) {
            return RawTriple{json_field_text(j[0]), json_field_text(j[1]), json_field_text(j[2])};
        }
    }
    return std::nullopt;
}

std::optional<RawTriple> try_json(std::string_view raw) {
    const auto open = raw.find_first_of("{[");
    if (open == std::string_view::npos) {
        return std::nullopt;
    }
    const char close_ch = raw[open] == '{' ? '}' : ']';
    const auto close = raw.find_last_of(close_ch);
    if (close == std::string_view::npos || close <= open) {
        return std::nullopt;
    }
    // Python-style single quotes are common in VLM output.
    std::string body(raw.substr(open, close - open + 1));
    json parsed = json::parse(body, nullptr, false);
    if (parsed.is_discarded()) {
        std::replace(body.begin(), body.end(), '\'', '"');
        parsed = json::parse(body, nullptr, false);
    }
    if (parsed.is_discarded()) {
        return std::nullopt;
    }
    return from_json(parsed);
}

// -- Labeled lines ----------------------------------------------------------------

const std::regex& label_regex() {
    static const std::regex re(
        R"((p_?obj|object(?:[ _]name)?|obj|p_?fore_?cond|fore(?:ground)?(?:[ _](?:imaging[ _])?condition)?|p_?back_?cond|back(?:ground)?(?:[ _](?:imaging[ _])?condition)?)\s*[:=])",
        std::regex::icase);
    return re;
}

std::optional<RawTriple> try_labeled(std::string_view raw) {
    const std::string text(raw);
    struct Hit {
        Field field;
        std::size_t value_begin;
        std::size_t label_begin;
    };
    std::vector<Hit> hits;
    for (auto it = std::sregex_iterator(text.begin(), text.end(), label_regex()); it != std::sregex_iterator(); ++it) {
        const auto& m = *it;
        // Require a word boundary before the label.
        const auto pos = static_cast<std::size_t>(m.position(0));
        if (pos > 0 && std::isalnum(static_cast<unsigned char>(text[pos - 1]))) {
            continue;
        }
        hits.push_back({classify_label(m.str(1)), pos + m.length(0), pos});
    }
    if (hits.empty()) {
        return std::nullopt;
    }
    RawTriple t;
    for (std::size_t i = 0; i < hits.size(); ++i) {
        const std::size_t end = i + 1 < hits.size() ? hits[i + 1].label_begin : text.size();
        std::string value = text.substr(hits[i].value_begin, end - hits[i].value_begin);
        const auto cut = value.find_first_of("|;\n");
        if (cut != std::string::npos) {
            value.resize(cut);
        }
        std::string* slot = hits[i].field == Field::object ? &t.object
                            : hits[i].field == Field::fore ? &t.fore
                            : hits[i].field == Field::back ? &t.back
                                                           : nullptr;
        if (slot && slot->empty()) {
            *slot = value;
        }
    }
    return t;
}

// -- Bare triple -------------------------------------------------------------------

std::optional<RawTriple> try_bare(std::string_view raw) {
    std::string text(raw);
    std::erase_if(text, [](char c) { return c == '[' || c == ']' || c == '(' || c == ')'; });
    for (char sep : {'|', ',', ';'}) {
        std::vector<std::string> parts;
        std::stringstream ss(text);
        std::string part;
        while (std::getline(ss, part, sep)) {
            if (!normalize_words(part).empty()) {
                parts.push_back(part);
            }
        }
        if (parts.size() == 3) {
            return RawTriple{parts[0], parts[1], parts[2]};
        }
    }
    return std::nullopt;
}

// -- Prose -------------------------------------------------------------------------

std::optional<RawTriple> try_prose(std::string_view raw) {
    const std::string text = lower(raw);
    static const std::regex object_re(
        R"((?:object|subject)\s+(?:is|seems to be|appears to be)\s+(?:an?\s+|the\s+)?([a-z][a-z\- ]*?)\s*(?:[.,;:]|$|\bwith\b|\bin\b|\bwhich\b|\bthat\b))");
    static const std::regex object_alt_re(
        R"(\b(?:shows|depicts|contains)\s+(?:an?\s+|the\s+)([a-z][a-z\-]*))");
    auto region_re = [](const char* region) {
        return std::regex(std::string(R"(\b)") + region +
                          R"([a-z ]*?\b(?:is|looks|appears|seems|has)\s+(?:lit\s+by\s+|in\s+|to\s+be\s+)?(?:an?\s+|the\s+)?([a-z][a-z\- ]*?)\s*(?:[.,;:]|$|\bwhile\b|\bwhereas\b|\bbut\b|\band the\b|\bwith\b))");
    };
    static const std::regex fore_re = region_re("foreground");
    static const std::regex back_re = region_re("background");

    RawTriple t;
    std::smatch m;
    if (std::regex_search(text, m, object_re) || std::regex_search(text, m, object_alt_re)) {
        t.object = m.str(1);
    }
    if (std::regex_search(text, m, fore_re)) {
        t.fore = m.str(1);
    }
    if (std::regex_search(text, m, back_re)) {
        t.back = m.str(1);
    }
    if (t.object.empty() && t.fore.empty() && t.back.empty()) {
        return std::nullopt;
    }
    return t;
}

bool complete(const std::optional<RawTriple>& t) {
    return t && !normalize_words(t->object).empty() && !normalize_words(t->fore).empty() &&
           !normalize_words(t->back).empty();
}

}  // namespace

// -- ConditionDescription -----------------------------------------------------------

std::string ConditionDescription::format() const {
    return "object: " + join(object_words) + " | foreground: " + join(fore_condition) +
           " | background: " + join(back_condition);
}

bool ConditionDescription::same_words(const ConditionDescription& other) const {
    return object_words == other.object_words && fore_condition == other.fore_condition &&
           back_condition == other.back_condition;
}

std::vector<std::string> normalize_words(std::string_view phrase) {
    std::string cleaned;
    cleaned.reserve(phrase.size());
    for (unsigned char c : phrase) {
        if (std::isalpha(c) || c == '-') {
            cleaned += static_cast<char>(std::tolower(c));
        } else if (c == '\'') {
            // drop apostrophes so "dog's" stays one token
        } else {
            cleaned += ' ';
        }
    }
    std::vector<std::string> words;
    std::stringstream ss(cleaned);
    std::string w;
    while (ss >> w) {
        while (!w.empty() && w.front() == '-') {
            w.erase(w.begin());
        }
        while (!w.empty() && w.back() == '-') {
            w.pop_back();
        }
        if (w.empty() || w.size() > 24 || is_stopword(w)) {
            continue;
        }
        words.push_back(w);
        if (words.size() == ConditionDescription::kMaxWordsPerField) {
            break;
        }
    }
    return words;
}

std::string build_task_prompt(const PromptConfig& config) {
    std::ostringstream out;
    out << "You are given a composite image and a binary mask of the pasted foreground object "
           "(white marks the foreground). "
        << "Please describe the imaging condition of both the foreground object and background. "
        << "First name the foreground object with a single noun. "
        << "Then describe how the foreground object was shot and how the background was shot, "
           "each with one to four simple words.";
    if (!config.scope.empty()) {
        out << " Only use words about " << join(config.scope, ", ") << ", etc.";
    }
    out << " Answer with exactly one line in this format: "
        << "object: <noun> | foreground: <words> | background: <words>";
    return out.str();
}

ConditionDescription parse_vlm_response(std::string_view raw) {
    if (raw.find_first_not_of(" \t\r\n") == std::string_view::npos) {
        throw DescriptionParseError("empty response", std::string(raw));
    }
    for (auto* parser : {&try_labeled, &try_json, &try_bare, &try_prose}) {
        auto t = parser(raw);
        if (complete(t)) {
            return finish(*t, raw);
        }
    }
    throw DescriptionParseError("could not find object, foreground and background fields", std::string(raw));
}

// -- ScriptedProvider ----------------------------------------------------------------

ScriptedProvider::ScriptedProvider(std::vector<std::string> responses, std::uint64_t seed)
    : responses_(std::move(responses)) {
    if (responses_.empty()) {
        throw ConfigError("scripted provider needs at least one response");
    }
    cursor_ = static_cast<std::size_t>(seed % responses_.size());
}

ScriptedProvider ScriptedProvider::from_file(const std::filesystem::path& path, std::uint64_t seed) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read scripted responses: " + path.string());
    }
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty() || line.front() == '#') {
            continue;
        }
        lines.push_back(line);
    }
    return ScriptedProvider(std::move(lines), seed);
}

std::vector<std::string> ScriptedProvider::describe(const std::string&, const RasterImage&,
                                                    const ForegroundMask&, int k) {
    ++calls_;
    std::vector<std::string> out;
    for (int i = 0; i < k; ++i) {
        out.push_back(responses_[cursor_]);
        cursor_ = (cursor_ + 1) % responses_.size();
    }
    return out;
}

// -- HttpProvider ---------------------------------------------------------------------

HttpProviderConfig HttpProviderConfig::from_env() {
    HttpProviderConfig c;
    if (const char* v = std::getenv("HARMONIA_VLM_ENDPOINT")) {
        c.endpoint = v;
    }
    if (const char* v = std::getenv("HARMONIA_VLM_API_KEY")) {
        c.api_key = v;
    }
    if (const char* v = std::getenv("HARMONIA_VLM_FORMAT")) {
        c.format = std::string(v) == "gemini" ? HttpProviderFormat::gemini : HttpProviderFormat::generic;
    }
    if (const char* v = std::getenv("HARMONIA_VLM_MODEL")) {
        c.model = v;
    }
    return c;
}

HttpProvider::HttpProvider(HttpProviderConfig config) : config_(std::move(config)) {
    if (config_.endpoint.empty()) {
        throw ConfigError("http provider needs an endpoint (HARMONIA_VLM_ENDPOINT)");
    }
}

std::string HttpProvider::id() const {
    return config_.format == HttpProviderFormat::gemini ? "gemini" : "http";
}

std::vector<std::string> HttpProvider::describe(const std::string& task_prompt, const RasterImage& image,
                                                const ForegroundMask& mask, int k) {
    static const std::regex url_re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(config_.endpoint, m, url_re)) {
        throw ConfigError("malformed provider endpoint: " + config_.endpoint);
    }
    const std::string origin = m.str(1);
    const std::string path = m.str(2).empty() ? "/" : m.str(2);

    httplib::Client client(origin);
    const auto seconds = static_cast<time_t>(config_.timeout_s);
    client.set_read_timeout(seconds, 0);
    client.set_connection_timeout(10, 0);

    const std::string image_b64 = detail::base64_encode(encode_png(image));
    std::vector<std::uint8_t> mask_png;
    {
        RasterImage mask_rgb(mask.width(), mask.height());
        for (int y = 0; y < mask.height(); ++y) {
            for (int x = 0; x < mask.width(); ++x) {
                for (int c = 0; c < 3; ++c) {
                    mask_rgb.at(y, x, c) = mask.at(y, x) ? 1.0f : 0.0f;
                }
            }
        }
        mask_png = encode_png(mask_rgb);
    }
    const std::string mask_b64 = detail::base64_encode(mask_png);

    httplib::Headers headers;
    if (!config_.api_key.empty()) {
        if (config_.format == HttpProviderFormat::gemini) {
            headers.emplace("x-goog-api-key", config_.api_key);
        } else {
            headers.emplace("Authorization", "Bearer " + config_.api_key);
        }
    }

    auto post = [&](const json& body) {
        auto res = client.Post(path, headers, body.dump(), "application/json");
        if (!res) {
            throw ProviderUnavailable("provider request failed: " + httplib::to_string(res.error()));
        }
        if (res->status != 200) {
            throw ProviderUnavailable("provider returned HTTP " + std::to_string(res->status));
        }
        json parsed = json::parse(res->body, nullptr, false);
        if (parsed.is_discarded()) {
            throw ProviderUnavailable("provider returned non-JSON body");
        }
        return parsed;
    };

    std::vector<std::string> out;
    if (config_.format == HttpProviderFormat::generic) {
        json body = {{"prompt", task_prompt}, {"image_png_b64", image_b64}, {"mask_png_b64", mask_b64}, {"k", k}};
        if (!config_.model.empty()) {
            body["model"] = config_.model;
        }
        json reply = post(body);
        if (!reply.contains("responses") || !reply["responses"].is_array()) {
            throw ProviderUnavailable("provider reply lacks a responses array");
        }
        for (const auto& r : reply["responses"]) {
            out.push_back(r.is_string() ? r.get<std::string>() : r.dump());
        }
        return out;
    }

    for (int i = 0; i < k; ++i) {
        json body = {
            {"contents",
             json::array({{{"parts", json::array({{{"text", task_prompt}},
                                                  {{"inline_data", {{"mime_type", "image/png"}, {"data", image_b64}}}},
                                                  {{"inline_data", {{"mime_type", "image/png"}, {"data", mask_b64}}}}})}}})},
            {"generationConfig", {{"temperature", 0.9}}},
        };
        json reply = post(body);
        std::string text;
        if (reply.contains("candidates") && !reply["candidates"].empty()) {
            const auto& parts = reply["candidates"][0]["content"]["parts"];
            for (const auto& p : parts) {
                if (p.contains("text")) {
                    text += p["text"].get<std::string>();
                }
            }
        }
        out.push_back(text);
    }
    return out;
}

// -- generate_descriptions ---------------------------------------------------------------

std::vector<ConditionDescription> generate_descriptions(const CompositeCase& composite,
                                                        DescriptionProvider& provider,
                                                        const GenerateOptions& options) {
    if (options.k < 1) {
        throw ConfigError("k must be at least 1");
    }
    const std::string prompt = build_task_prompt(options.prompt);

    auto request = [&](int n) {
        std::string last_error;
        for (int attempt = 0; attempt < std::max(1, options.max_attempts); ++attempt) {
            try {
                return provider.describe(prompt, composite.image, composite.mask, n);
            } catch (const std::exception& e) {
                last_error = e.what();
            }
        }
        throw ProviderUnavailable("provider '" + provider.id() + "' failed after " +
                                  std::to_string(options.max_attempts) + " attempts: " + last_error);
    };

    auto try_parse = [&](const std::string& raw) -> std::optional<ConditionDescription> {
        try {
            auto d = parse_vlm_response(raw);
            d.provider_id = provider.id();
            return d;
        } catch (const DescriptionParseError&) {
            return std::nullopt;
        }
    };

    const auto raws = request(options.k);
    std::vector<std::optional<ConditionDescription>> slots;
    for (const auto& r : raws) {
        slots.push_back(try_parse(r));
    }

    auto is_duplicate = [&](const ConditionDescription& d, std::size_t upto) {
        for (std::size_t i = 0; i < upto; ++i) {
            if (slots[i] && slots[i]->same_words(d)) {
                return true;
            }
        }
        return false;
    };

    std::vector<std::size_t> needy;
    for (std::size_t i = 0; i < slots.size(); ++i) {
        if (!slots[i] || is_duplicate(*slots[i], i)) {
            needy.push_back(i);
        }
    }

    if (!needy.empty()) {
        const auto extra = request(static_cast<int>(needy.size()));
        std::size_t next = 0;
        for (const auto& r : extra) {
            if (next == needy.size()) {
                break;
            }
            auto d = try_parse(r);
            if (!d || is_duplicate(*d, slots.size())) {
                continue;
            }
            slots[needy[next++]] = std::move(d);
        }
    }

    std::vector<ConditionDescription> out;
    for (auto& s : slots) {
        if (s) {
            out.push_back(std::move(*s));
        }
    }
    if (out.empty()) {
        std::string joined;
        for (const auto& r : raws) {
            joined += r + "\n";
        }
        throw DescriptionParseError("no provider response could be parsed", joined);
    }
    return out;
}

}  // namespace harmonia
