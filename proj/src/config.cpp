#include "harmonia/config.hpp"

#include "harmonia/errors.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace harmonia {

using nlohmann::json;

json default_config_json() {
    const RefineConfig r;
    const PreserveConfig p;
    const PromptConfig prompt;
    const DecideConfig d;
    const LutFitConfig l;
    return {
        {"seed", 0},
        {"working_size", 512},
        {"backend", {{"kind", "toy"}, {"weights", ""}, {"steps", 50}}},
        {"sampler", {{"guidance_invert", 0.0}, {"guidance_edit", 2.5}, {"inversion_fixed_point_iters", nullptr}}},
        {"prompt", {{"formal", false}, {"condition_first", false}, {"scope", prompt.scope}}},
        {"descriptor",
         {{"k", 3},
          {"max_attempts", 3},
          {"provider",
           {{"kind", "http"},
            {"responses", json::array()},
            {"responses_file", ""},
            {"endpoint", ""},
            {"model", ""},
            {"timeout_s", 60.0}}}}},
        {"refine",
         {{"style", "optimizing"},
          {"w", r.w},
          {"lr", r.lr},
          {"inner_steps", r.inner_steps},
          {"epochs", r.epochs},
          {"batch", r.batch},
          {"regularize", r.regularize}}},
        {"preserve",
         {{"gamma", p.gamma},
          {"sobel_mode", to_string(p.sobel_mode)},
          {"freeze_cross_attention", p.freeze_cross_attention},
          {"inject_self_attention", p.inject_self_attention},
          {"self_attention_fraction", p.self_attention_fraction},
          {"painterly", false},
          {"painterly_fraction", PreserveConfig::kPainterlyFraction},
          {"edge_constraint", p.edge_constraint},
          {"null_lr", p.null_lr},
          {"null_inner_steps", p.null_inner_steps},
          {"edge_plugin", ""}}},
        {"evaluator", {{"kind", "model"}, {"model", ""}, {"scores", json::array()}, {"scores_file", ""}}},
        {"run",
         {{"max_iterations", d.max_iterations},
          {"max_regenerations", d.max_regenerations},
          {"interactive", false},
          {"feather", false},
          {"feather_radius", 3.0},
          {"snapshots", 4}}},
        {"luts",
         {{"enabled", true}, {"size", l.size}, {"lambda", l.lambda}, {"min_pixels_per_cell", l.min_pixels_per_cell}}},
    };
}

json merge_config(json base, const json& overlay) {
    if (!overlay.is_object() || !base.is_object()) return overlay;
    for (auto it = overlay.begin(); it != overlay.end(); ++it) {
        if (base.contains(it.key()) && base[it.key()].is_object() && it.value().is_object()) {
            base[it.key()] = merge_config(base[it.key()], it.value());
        } else {
            base[it.key()] = it.value();
        }
    }
    return base;
}

namespace {

const std::vector<std::vector<std::string>> kPathKeys = {
    {"backend", "weights"},
    {"descriptor", "provider", "responses_file"},
    {"preserve", "edge_plugin"},
    {"evaluator", "model"},
    {"evaluator", "scores_file"},
};

json* find_path(json& root, const std::vector<std::string>& keys) {
    json* node = &root;
    for (const auto& k : keys) {
        if (!node->is_object() || !node->contains(k)) return nullptr;
        node = &(*node)[k];
    }
    return node;
}

bool compatible(const json& want, const json& got) {
    if (want.is_null()) return got.is_null() || got.is_number_integer();
    if (want.is_number_float()) return got.is_number();
    if (want.is_number_integer()) return got.is_number_integer() || (got.is_number_float() && got == std::floor(got.get<double>()));
    return want.type() == got.type();
}

void check_shape(const json& defaults, const json& layer, const std::string& prefix) {
    if (!layer.is_object()) throw ConfigError("config " + (prefix.empty() ? "root" : "'" + prefix + "'") + " must be an object");
    for (auto it = layer.begin(); it != layer.end(); ++it) {
        const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!defaults.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
        const json& want = defaults.at(it.key());
        if (want.is_object()) {
            check_shape(want, it.value(), key);
        } else if (!compatible(want, it.value())) {
            throw ConfigError("config key '" + key + "' expects " + std::string(want.is_null() ? "integer or null" : want.type_name()) +
                              ", got " + it.value().type_name());
        }
    }
}

bool layer_sets(const std::vector<json>& layers, const std::string& section, const std::string& key) {
    for (const auto& l : layers) {
        if (l.contains(section) && l[section].is_object() && l[section].contains(key)) return true;
    }
    return false;
}

void require(bool ok, const std::string& what) {
    if (!ok) throw ConfigError("config: " + what);
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#') continue;
        out.push_back(line);
    }
    return out;
}

}  // namespace

json load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config " + path.string() + " must hold a JSON object");
    const auto base = std::filesystem::absolute(path).parent_path();
    for (const auto& keys : kPathKeys) {
        json* v = find_path(j, keys);
        if (!v || !v->is_string() || v->get<std::string>().empty()) continue;
        const std::filesystem::path p = v->get<std::string>();
        if (p.is_relative()) *v = (base / p).lexically_normal().string();
    }
    return j;
}

json parse_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
    const std::string path = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::parse_error&) {
        value = text;
    }
    std::vector<std::string> keys;
    std::stringstream ss(path);
    for (std::string k; std::getline(ss, k, '.');) {
        if (k.empty()) throw ConfigError("empty key in override: " + assignment);
        keys.push_back(k);
    }
    for (auto it = keys.rbegin(); it != keys.rend(); ++it) value = json{{*it, value}};
    return value;
}

HarmoniaConfig resolve_config(const std::vector<json>& layers) {
    const json defaults = default_config_json();
    json merged = defaults;
    if (const char* w = std::getenv("HARMONIA_BACKEND_WEIGHTS"); w && *w) merged["backend"]["weights"] = w;
    for (const auto& l : layers) {
        check_shape(defaults, l, "");
        merged = merge_config(merged, l);
    }

    const std::string style = merged["refine"]["style"];
    require(style == "optimizing" || style == "training", "refine.style must be optimizing or training");
    if (style == "training") {
        const RefineConfig t = RefineConfig::training_defaults();
        if (!layer_sets(layers, "refine", "w")) merged["refine"]["w"] = t.w;
        if (!layer_sets(layers, "refine", "lr")) merged["refine"]["lr"] = t.lr;
    }

    HarmoniaConfig c;
    c.resolved = merged;
    const json& m = merged;
    c.seed = m["seed"].get<std::uint64_t>();

    c.backend.kind = m["backend"]["kind"];
    c.backend.weights = m["backend"]["weights"].get<std::string>();
    c.backend.steps = m["backend"]["steps"];
    require(c.backend.steps >= 2, "backend.steps must be at least 2");

    const json& pv = m["descriptor"]["provider"];
    c.provider.kind = pv["kind"];
    require(c.provider.kind == "http" || c.provider.kind == "gemini" || c.provider.kind == "scripted",
            "descriptor.provider.kind must be http, gemini or scripted");
    c.provider.responses = pv["responses"].get<std::vector<std::string>>();
    c.provider.responses_file = pv["responses_file"].get<std::string>();
    c.provider.endpoint = pv["endpoint"];
    c.provider.model = pv["model"];
    c.provider.timeout_s = pv["timeout_s"];

    const json& ev = m["evaluator"];
    c.evaluator.kind = ev["kind"];
    require(c.evaluator.kind == "model" || c.evaluator.kind == "scripted" || c.evaluator.kind == "none",
            "evaluator.kind must be model, scripted or none");
    c.evaluator.model = ev["model"].get<std::string>();
    c.evaluator.scores = ev["scores"].get<std::vector<double>>();
    c.evaluator.scores_file = ev["scores_file"].get<std::string>();

    RunConfig& r = c.run;
    r.working_size = m["working_size"];
    require(r.working_size >= RasterImage::kMinSide, "working_size too small");

    auto& s = r.iteration.sampler;
    s.steps = c.backend.steps;
    s.guidance_invert = m["sampler"]["guidance_invert"];
    s.guidance_edit = m["sampler"]["guidance_edit"];
    require(s.guidance_invert >= 0 && s.guidance_edit >= 0, "guidance scales must be >= 0");
    if (!m["sampler"]["inversion_fixed_point_iters"].is_null()) {
        s.inversion_fixed_point_iters = m["sampler"]["inversion_fixed_point_iters"].get<int>();
    }

    r.iteration.layout.formal = m["prompt"]["formal"];
    r.iteration.layout.condition_first = m["prompt"]["condition_first"];
    r.generate.prompt.scope = m["prompt"]["scope"].get<std::vector<std::string>>();
    r.generate.k = m["descriptor"]["k"];
    r.generate.max_attempts = m["descriptor"]["max_attempts"];
    require(r.generate.k >= 1, "descriptor.k must be at least 1");
    require(r.generate.max_attempts >= 1, "descriptor.max_attempts must be at least 1");

    auto& rf = r.iteration.refine;
    rf.style = style == "training" ? RefineStyle::training : RefineStyle::optimizing;
    rf.w = m["refine"]["w"];
    rf.lr = m["refine"]["lr"];
    rf.inner_steps = m["refine"]["inner_steps"];
    rf.epochs = m["refine"]["epochs"];
    rf.batch = m["refine"]["batch"];
    rf.regularize = m["refine"]["regularize"];
    require(rf.w > 0 && rf.lr > 0 && rf.inner_steps >= 0 && rf.epochs >= 0 && rf.batch >= 1,
            "refine values must be positive");

    auto& pr = r.iteration.preserve;
    const json& pj = m["preserve"];
    pr.gamma = pj["gamma"];
    pr.sobel_mode = sobel_mode_from_string(pj["sobel_mode"]);
    pr.freeze_cross_attention = pj["freeze_cross_attention"];
    pr.inject_self_attention = pj["inject_self_attention"];
    pr.self_attention_fraction = pj["self_attention_fraction"];
    pr.edge_constraint = pj["edge_constraint"];
    pr.null_lr = pj["null_lr"];
    pr.null_inner_steps = pj["null_inner_steps"];
    if (const std::string plugin = pj["edge_plugin"]; !plugin.empty()) pr.edge_plugin = plugin;
    c.painterly = pj["painterly"];
    const double painterly_fraction = pj["painterly_fraction"];
    require(painterly_fraction >= 0 && painterly_fraction <= 1, "preserve.painterly_fraction must lie in [0,1]");
    if (c.painterly) pr.self_attention_fraction = painterly_fraction;
    require(pr.self_attention_fraction >= 0 && pr.self_attention_fraction <= 1,
            "preserve.self_attention_fraction must lie in [0,1]");
    require(pr.gamma >= 0 && pr.null_lr > 0 && pr.null_inner_steps >= 0, "preserve values out of range");

    const json& rj = m["run"];
    r.decide.max_iterations = rj["max_iterations"];
    r.decide.max_regenerations = rj["max_regenerations"];
    require(r.decide.max_iterations >= 1 && r.decide.max_regenerations >= 0, "run limits out of range");
    r.interactive = rj["interactive"];
    r.iteration.feather = rj["feather"];
    r.iteration.feather_radius = rj["feather_radius"];
    r.iteration.snapshots = rj["snapshots"];

    const json& lj = m["luts"];
    r.fit_luts = lj["enabled"];
    r.lut.size = lj["size"];
    r.lut.lambda = lj["lambda"];
    r.lut.min_pixels_per_cell = lj["min_pixels_per_cell"];
    require(r.lut.size >= 2 && r.lut.lambda >= 0, "luts values out of range");
    return c;
}

RunConfig HarmoniaConfig::run_config() const {
    RunConfig r = run;
    r.iteration.sampler.seed = seed;
    r.iteration.refine.seed = seed;
    return r;
}

std::unique_ptr<DescriptionProvider> make_provider(const HarmoniaConfig& cfg) {
    const ProviderSettings& p = cfg.provider;
    if (p.kind == "scripted") {
        std::vector<std::string> lines = p.responses;
        if (!p.responses_file.empty()) {
            for (auto& l : read_lines(p.responses_file)) lines.push_back(std::move(l));
        }
        if (lines.empty()) throw ConfigError("scripted provider needs responses or responses_file");
        return std::make_unique<ScriptedProvider>(std::move(lines), cfg.seed);
    }
    HttpProviderConfig h = HttpProviderConfig::from_env();
    if (!p.endpoint.empty()) h.endpoint = p.endpoint;
    if (!p.model.empty()) h.model = p.model;
    if (p.kind == "gemini") h.format = HttpProviderFormat::gemini;
    h.timeout_s = p.timeout_s;
    return std::make_unique<HttpProvider>(h);
}

std::unique_ptr<HarmonyEvaluator> make_evaluator(const HarmoniaConfig& cfg, std::vector<std::string>& warnings) {
    const EvaluatorSettings& e = cfg.evaluator;
    if (e.kind == "none") return nullptr;
    if (e.kind == "scripted") {
        std::vector<double> scores = e.scores;
        if (!e.scores_file.empty()) {
            for (const auto& l : read_lines(e.scores_file)) scores.push_back(std::stod(l));
        }
        return std::make_unique<ScriptedEvaluator>(std::move(scores));
    }
    try {
        if (e.model.empty()) throw EvaluatorUnavailable("no evaluator model configured");
        return std::make_unique<ModelEvaluator>(HarmonyModel::load(e.model));
    } catch (const EvaluatorUnavailable& err) {
        warnings.push_back(std::string("evaluator unavailable, running fixed iterations: ") + err.what());
        return nullptr;
    }
}

}  // namespace harmonia
