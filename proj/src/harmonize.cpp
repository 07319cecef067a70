#include "harmonia/harmonize.hpp"

#include "harmonia/diffusion/sampler.hpp"
#include "harmonia/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

namespace harmonia {

using diffusion::PromptTokens;
using diffusion::TokenTag;
using nlohmann::json;

namespace {

template <class Fn>
auto stage(const char* name, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const IterationFailed&) {
        throw;
    } catch (const Error& e) {
        throw IterationFailed(name, e.what(), e.code());
    } catch (const std::exception& e) {
        throw IterationFailed(name, e.what(), ErrorCode::internal);
    }
}

RefineSummary summarize(const RefinedPromptState& s) {
    RefineSummary out;
    if (s.losses.empty()) return out;
    for (const auto& l : s.losses) {
        out.initial_loss += l.at_initial;
        out.final_loss += l.at_end;
    }
    out.initial_loss /= static_cast<double>(s.losses.size());
    out.final_loss /= static_cast<double>(s.losses.size());
    out.distance = s.losses.back().distance;
    return out;
}

// Output = input + (target - source): the edit carries only the colour change
// between the two branches, so reconstruction error common to both cancels.
RasterImage transfer_edit(const RasterImage& input, const RasterImage& source, const RasterImage& target) {
    RasterImage out = input;
    auto o = out.data();
    auto s = source.data();
    auto t = target.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = o[i] + (t[i] - s[i]);
    out.clamp();
    return out;
}

}  // namespace

std::set<int> snapshot_schedule(int steps, int count) {
    std::set<int> out;
    if (count <= 0 || steps <= 0) return out;
    if (count == 1) return {steps};
    for (int i = 0; i < count; ++i) {
        const double t = steps - (steps - 1) * static_cast<double>(i) / (count - 1);
        out.insert(static_cast<int>(std::lround(t)));
    }
    return out;
}

EditPlan build_edit_plan(const PromptTokens& fore_tokens, const RefinedPromptState& fore,
                         const RefinedPromptState& back, int steps, double guidance,
                         const std::set<int>& snapshot_steps) {
    const std::vector<int> replaced = fore_tokens.positions(TokenTag::fore_cond);
    if (replaced.empty()) throw NoConditionTokens("prompt has no foreground condition tokens");
    EditPlan plan;
    plan.guidance = guidance;
    plan.replaced = replaced;
    plan.snapshot_steps = snapshot_steps;
    plan.source.resize(steps + 1);
    plan.target.resize(steps + 1);
    for (int k = 1; k <= steps; ++k) {
        plan.source[k] = fore.tokens_at(fore_tokens, k);
        const Eigen::RowVectorXd fused = fused_background_embedding(back.embeddings_at(k), back.alpha);
        plan.target[k] = plan.source[k];
        for (int p : replaced) plan.target[k].embeddings.row(p) = fused;
    }
    plan.source[0] = plan.source[1];
    plan.target[0] = plan.target[1];
    return plan;
}

IterationResult harmonize_iteration(const RasterImage& current, const ForegroundMask& mask,
                                    const ConditionDescription& description, diffusion::DiffusionBackend& backend,
                                    const IterationConfig& cfg, std::shared_ptr<const EdgeDetector> deep) {
    const auto t0 = std::chrono::steady_clock::now();
    stage("input", [&] { validate_case(current, mask); });

    const auto [fore_tokens, back_tokens] = stage("tokens", [&] {
        const auto fw = assemble_prompt(description.object_words, description.fore_condition, TokenTag::fore_cond,
                                        cfg.layout);
        const auto bw = assemble_prompt(description.object_words, description.back_condition, TokenTag::back_cond,
                                        cfg.layout);
        return std::pair{backend.embed_text(fw.words, fw.tags), backend.embed_text(bw.words, bw.tags)};
    });

    diffusion::SamplerConfig sampler = cfg.sampler;
    const auto trajectory = stage("invert", [&] { return diffusion::invert(backend, current, fore_tokens, sampler); });
    const int steps = trajectory.steps();

    const auto fore = stage("refine_foreground", [&] {
        return refine(backend, trajectory, fore_tokens, TokenTag::fore_cond, mask, cfg.refine);
    });
    const auto back = stage("refine_background", [&] {
        return refine(backend, trajectory, back_tokens, TokenTag::back_cond, mask.complement(), cfg.refine, true);
    });

    const auto edit = stage("edit", [&] {
        const EditPlan plan = build_edit_plan(fore_tokens, fore, back, steps, sampler.guidance_edit,
                                              snapshot_schedule(steps, cfg.snapshots));
        return run_edit(backend, trajectory, plan, current, cfg.preserve, deep);
    });

    IterationResult it;
    it.input = current;
    it.description = description;
    it.alpha = back.alpha;
    it.fore_refine = summarize(fore);
    it.back_refine = summarize(back);
    it.edge_trace = edit.null_trace;
    it.final_edge_loss = edit.final_edge_loss;
    it.input_edge_loss = edge_loss(current, edit.source_image, cfg.preserve.gamma, cfg.preserve.sobel_mode);
    it.snapshots = edit.snapshots;
    it.attention_side = backend.attention_resolution();
    it.output = stage("composite", [&] {
        const RasterImage edited = transfer_edit(current, edit.source_image, edit.target_image);
        return cfg.feather ? composite_back_feathered(current, edited, mask, cfg.feather_radius)
                           : composite_back(current, edited, mask);
    });
    it.duration_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return it;
}

// -- Run loop ------------------------------------------------------------------------------

const char* to_string(RunStatus status) {
    switch (status) {
        case RunStatus::running: return "running";
        case RunStatus::awaiting_human: return "awaiting_human";
        case RunStatus::concluded: return "concluded";
        case RunStatus::failed: return "failed";
        case RunStatus::cancelled: return "cancelled";
    }
    return "failed";
}

RunStatus run_status_from_string(const std::string& name) {
    for (auto s : {RunStatus::running, RunStatus::awaiting_human, RunStatus::concluded, RunStatus::failed,
                   RunStatus::cancelled}) {
        if (name == to_string(s)) return s;
    }
    throw ConfigError("unknown run status: " + name);
}

std::vector<std::optional<double>> HarmonizationRun::scores() const {
    std::vector<std::optional<double>> out;
    for (const auto& it : iterations) out.push_back(it.score);
    return out;
}

namespace {

class Cancelled : public std::exception {};

class RunDriver {
public:
    RunDriver(const CompositeCase& composite, const RunConfig& cfg, RunContext& ctx)
        : original_(composite), cfg_(cfg), ctx_(ctx) {}

    HarmonizationRun go() {
        run_.case_id = original_.case_id;
        run_.config = ctx_.config_snapshot;
        run_.original_size = original_.image.size();
        run_.evaluator_id = ctx_.evaluator ? ctx_.evaluator->id() : "none";
        run_.warnings = ctx_.warnings;
        try {
            if (!ctx_.backend) throw BackendUnavailable("no backend session");
            if (!ctx_.provider) throw ProviderUnavailable("no description provider");
            working_ = original_.image.size() == Size{cfg_.working_size, cfg_.working_size}
                           ? original_
                           : resize_to_working(original_, cfg_.working_size);
            run_.working_size = working_.image.size();
            if (!ctx_.run_dir.empty()) std::filesystem::create_directories(ctx_.run_dir);
            loop();
            finish_concluded();
        } catch (const Cancelled&) {
            run_.status = RunStatus::cancelled;
            run_.failure = "cancelled";
            run_.failure_code = "CANCELLED";
            emit("failed", {{"code", "CANCELLED"}, {"message", "cancelled"}, {"stage", nullptr}});
            persist();
        } catch (const IterationFailed& e) {
            fail(e, e.stage());
        } catch (const Error& e) {
            fail(e, "");
        } catch (const std::exception& e) {
            fail(Error(ErrorCode::internal, e.what()), "");
        }
        return std::move(run_);
    }

private:
    void emit(const std::string& kind, json payload) {
        RunEvent ev{static_cast<long>(run_.events.size()) + 1, kind, std::move(payload)};
        run_.events.push_back(ev);
        if (ctx_.observer) ctx_.observer->on_event(run_, run_.events.back());
    }

    void check_cancel() const {
        if (ctx_.observer && ctx_.observer->cancelled()) throw Cancelled();
    }

    void persist() {
        if (ctx_.run_dir.empty()) return;
        write_run_summary(run_, ctx_.run_dir);
    }

    void fail(const Error& e, const std::string& stage_name) {
        run_.status = RunStatus::failed;
        run_.failure = e.what();
        run_.failure_code = std::string(error_code_name(e.code()));
        if (auto* f = dynamic_cast<const IterationFailed*>(&e)) {
            run_.failure_code = std::string(error_code_name(f->cause()));
        }
        update_best();
        emit("failed", {{"code", run_.failure_code},
                        {"message", run_.failure},
                        {"stage", stage_name.empty() ? json(nullptr) : json(stage_name)}});
        persist();
    }

    std::vector<ConditionDescription> fresh_descriptions(int round) {
        auto ds = generate_descriptions(working_, *ctx_.provider, cfg_.generate);
        for (std::size_t i = 0; i < ds.size(); ++i) announce(ds[i], round, static_cast<int>(i), "provider");
        return ds;
    }

    void announce(const ConditionDescription& d, int round, int slot, const char* source) {
        run_.descriptions.push_back(d);
        emit("description_generated",
             {{"round", round}, {"slot", slot}, {"source", source}, {"description", description_to_json(d)}});
    }

    // Runs one iteration, scores it, writes artifacts, then announces it.
    int iterate(const RasterImage& input, int input_index, const ConditionDescription& d, const char* role) {
        check_cancel();
        IterationResult it = harmonize_iteration(input, working_.mask, d, *ctx_.backend, cfg_.iteration, ctx_.deep);
        it.index = static_cast<int>(run_.iterations.size());
        it.role = role;
        it.input_index = input_index;
        if (ctx_.evaluator) it.score = ctx_.evaluator->score(it.output, working_.mask);
        if (cfg_.fit_luts) {
            try {
                it.lut = fit_lut(it.input, it.output, working_.mask, cfg_.lut);
            } catch (const Error& e) {
                run_.warnings.push_back("lut " + std::to_string(it.index) + ": " + e.what());
            }
        }
        if (!ctx_.run_dir.empty()) write_iteration_artifacts(it, ctx_.run_dir);
        run_.iterations.push_back(std::move(it));
        const IterationResult& done = run_.iterations.back();
        update_best();
        persist();
        emit("iteration_done", {{"iteration", done.index},
                                {"role", done.role},
                                {"input_index", done.input_index},
                                {"description", description_to_json(done.description)},
                                {"final_edge_loss", done.final_edge_loss},
                                {"image", "iter_" + std::to_string(done.index) + ".png"}});
        if (done.score) emit("score", {{"iteration", done.index}, {"value", *done.score}});
        if (ctx_.observer) ctx_.observer->on_iteration(run_, done);
        return done.index;
    }

    double score_of(int index) const { return run_.iterations[index].score.value_or(0.0); }

    void update_best() {
        if (run_.iterations.empty()) return;
        if (!ctx_.evaluator) {
            if (!run_.path.empty()) run_.best_index = run_.path.back();
            else run_.best_index = 0;
            return;
        }
        std::vector<double> s;
        for (const auto& it : run_.iterations) s.push_back(it.score.value_or(-1.0));
        run_.best_index = select_initial(s);
    }

    int path_best() const {
        std::vector<double> s;
        for (int i : run_.path) s.push_back(score_of(i));
        return select_initial(s);
    }

    void record(int after, const Decision& proposed, const Decision& applied, const std::string& source,
                const std::optional<ConditionDescription>& d, const std::string& note) {
        run_.decisions.push_back({after, proposed, applied, source, d, note});
        json payload = {{"after_iteration", after}, {"applied", true}, {"source", source},
                        {"decision", decision_to_json(applied)}};
        if (d) payload["description"] = description_to_json(*d);
        if (!note.empty()) payload["note"] = note;
        emit("decision_proposed", std::move(payload));
    }

    void loop() {
        // Candidates, each fresh from the composite.
        const auto initial = fresh_descriptions(0);
        std::vector<int> candidates;
        std::vector<double> cand_scores;
        std::vector<ConditionDescription> cand_desc;
        for (const auto& d : initial) {
            try {
                const int idx = iterate(working_.image, -1, d, "candidate");
                candidates.push_back(idx);
                cand_scores.push_back(score_of(idx));
                cand_desc.push_back(d);
            } catch (const IterationFailed& e) {
                run_.warnings.push_back(std::string("candidate failed: ") + e.what());
                if (&d == &initial.back() && candidates.empty()) throw;
            }
        }
        const int pick = ctx_.evaluator ? select_initial(cand_scores) : 0;
        run_.path = {candidates[pick]};
        ConditionDescription active = cand_desc[pick];
        update_best();

        while (true) {
            check_cancel();
            std::vector<double> history;
            for (int i : run_.path) history.push_back(score_of(i));
            const int pos = path_best();
            Decision proposed = decide(history, pos, run_.regenerations, cfg_.decide);
            if (proposed.revert_to) proposed.revert_to = run_.path[*proposed.revert_to];
            const int last = run_.path.back();
            const std::string auto_source = ctx_.evaluator ? "evaluator" : "fixed";

            Decision applied = proposed;
            std::optional<ConditionDescription> human_desc;
            std::string source = auto_source;
            if (cfg_.interactive) {
                emit("decision_proposed", {{"after_iteration", last},
                                           {"applied", false},
                                           {"source", auto_source},
                                           {"decision", decision_to_json(proposed)}});
                run_.status = RunStatus::awaiting_human;
                persist();
                emit("awaiting_human", {{"after_iteration", last}, {"proposal", decision_to_json(proposed)}});
                std::optional<HumanDecision> h;
                if (ctx_.observer) h = ctx_.observer->await_decision(run_, proposed);
                else h = HumanDecision{proposed.kind, std::nullopt};
                if (!h) throw Cancelled();
                run_.status = RunStatus::running;
                source = "human";
                applied.kind = h->kind;
                applied.revert_to = h->kind == DecisionKind::Regenerate
                                        ? std::optional<int>(run_.path[pos])
                                        : std::nullopt;
                human_desc = h->description;
            }
            record(last, proposed, applied, source, human_desc, "");

            if (applied.kind == DecisionKind::Conclude) return;

            if (applied.kind == DecisionKind::Continue) {
                if (human_desc) {
                    active = *human_desc;
                    announce(active, run_.regenerations, 0, "human");
                }
                const int prev = run_.path.back();
                try {
                    run_.path.push_back(
                        iterate(run_.iterations[prev].output, prev, active, "chain"));
                } catch (const IterationFailed& e) {
                    run_.warnings.push_back(std::string("iteration failed, concluding: ") + e.what());
                    return;
                }
                continue;
            }

            // Regenerate: back to the best state of the chain, fresh descriptions from there.
            const int best = *applied.revert_to;
            run_.path.resize(static_cast<std::size_t>(pos) + 1);
            ++run_.regenerations;
            std::vector<ConditionDescription> fresh;
            if (human_desc) {
                fresh = {*human_desc};
                announce(*human_desc, run_.regenerations, 0, "human");
            } else {
                try {
                    fresh = fresh_descriptions(run_.regenerations);
                } catch (const Error& e) {
                    run_.warnings.push_back(std::string("regeneration failed, concluding: ") + e.what());
                    return;
                }
            }
            int best_new = -1;
            ConditionDescription best_desc;
            for (const auto& d : fresh) {
                try {
                    const int idx = iterate(run_.iterations[best].output, best, d, "regenerated");
                    if (best_new < 0 || score_of(idx) > score_of(best_new)) {
                        best_new = idx;
                        best_desc = d;
                    }
                } catch (const IterationFailed& e) {
                    run_.warnings.push_back(std::string("regenerated iteration failed: ") + e.what());
                }
            }
            const bool success = best_new >= 0 && (cfg_.interactive || !ctx_.evaluator ||
                                                   score_of(best_new) > score_of(best));
            if (!success) {
                const Decision stop{DecisionKind::Conclude, std::nullopt};
                record(best_new >= 0 ? best_new : best, stop, stop, auto_source, std::nullopt,
                       "regeneration did not improve on the best score");
                return;
            }
            run_.path.push_back(best_new);
            active = best_desc;
        }
    }

    void finish_concluded() {
        update_best();
        run_.status = RunStatus::concluded;
        const IterationResult& best = run_.iterations.at(*run_.best_index);
        if (best.output.size() == original_.image.size()) {
            run_.final_image = best.output;
        } else {
            const RasterImage up = resize_bilinear(best.output, original_.image.size());
            run_.final_image = composite_back(original_.image, up, original_.mask);
        }
        json payload = {{"best_index", *run_.best_index},
                        {"iterations", run_.iterations.size()},
                        {"regenerations", run_.regenerations}};
        payload["score"] = best.score ? json(*best.score) : json(nullptr);
        if (!ctx_.run_dir.empty()) save_png(run_.final_image, ctx_.run_dir / "final.png");
        persist();
        emit("concluded", std::move(payload));
        persist();
    }

    const CompositeCase& original_;
    CompositeCase working_;
    const RunConfig& cfg_;
    RunContext& ctx_;
    HarmonizationRun run_;
};

}  // namespace

HarmonizationRun run_harmonization(const CompositeCase& composite, const RunConfig& cfg, RunContext& ctx) {
    validate_case(composite.image, composite.mask);
    return RunDriver(composite, cfg, ctx).go();
}

MultiResult harmonize_multi(const RasterImage& image, const std::vector<ForegroundMask>& masks,
                            const RunConfig& cfg, RunContext& ctx) {
    if (masks.empty()) throw ConfigError("no masks given");
    for (const auto& m : masks) validate_case(image, m);
    for (std::size_t a = 0; a < masks.size(); ++a)
        for (std::size_t b = a + 1; b < masks.size(); ++b) {
            const auto da = masks[a].data();
            const auto db = masks[b].data();
            for (std::size_t i = 0; i < da.size(); ++i)
                if (da[i] && db[i])
                    throw MaskOverlapError("masks " + std::to_string(a) + " and " + std::to_string(b) + " overlap");
        }

    MultiResult out;
    out.final_image = image;
    const std::filesystem::path root = ctx.run_dir;
    for (std::size_t i = 0; i < masks.size(); ++i) {
        if (!root.empty()) ctx.run_dir = masks.size() == 1 ? root : root / ("instance_" + std::to_string(i));
        const CompositeCase c = make_case(out.final_image, masks[i], "instance_" + std::to_string(i));
        HarmonizationRun r = run_harmonization(c, cfg, ctx);
        if (r.status == RunStatus::concluded) out.final_image = r.final_image;
        out.runs.push_back(std::move(r));
        if (out.runs.back().status != RunStatus::concluded) break;
    }
    ctx.run_dir = root;
    return out;
}

// -- Serialization ------------------------------------------------------------------------

json description_to_json(const ConditionDescription& d) {
    return {{"object", d.object_words},
            {"foreground", d.fore_condition},
            {"background", d.back_condition},
            {"provider", d.provider_id},
            {"text", d.format()}};
}

ConditionDescription description_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("description must be an object");
    ConditionDescription d;
    auto words = [&](const char* key) {
        if (!j.contains(key)) throw ConfigError(std::string("description lacks '") + key + "'");
        const auto& v = j.at(key);
        std::vector<std::string> out;
        if (v.is_string()) return normalize_words(v.get<std::string>());
        if (!v.is_array()) throw ConfigError(std::string("description field '") + key + "' must be text or a list");
        for (const auto& w : v) {
            if (!w.is_string()) throw ConfigError(std::string("description field '") + key + "' holds a non-string");
            for (auto& n : normalize_words(w.get<std::string>())) out.push_back(std::move(n));
        }
        if (out.size() > ConditionDescription::kMaxWordsPerField) out.resize(ConditionDescription::kMaxWordsPerField);
        return out;
    };
    d.object_words = words("object");
    d.fore_condition = words("foreground");
    d.back_condition = words("background");
    if (d.object_words.empty() || d.fore_condition.empty() || d.back_condition.empty()) {
        throw ConfigError("description fields must each hold at least one word");
    }
    d.provider_id = j.value("provider", std::string("human"));
    return d;
}

json decision_to_json(const Decision& d) {
    return {{"kind", to_string(d.kind)}, {"revert_to", d.revert_to ? json(*d.revert_to) : json(nullptr)}};
}

namespace {

json lut_json(const LutFit& f) {
    return {{"lambda", f.lambda_used},
            {"flagged", f.flagged},
            {"mean_abs_residual", f.mean_abs_residual},
            {"pixels", f.pixels},
            {"occupied_cells", f.occupied_cells}};
}

json iteration_json(const IterationResult& it) {
    json trace = json::array();
    for (const auto& t : it.edge_trace) {
        trace.push_back({{"step", t.step},
                         {"before", t.loss_before},
                         {"after", t.loss_after},
                         {"iterations", t.iterations},
                         {"flagged", t.flagged}});
    }
    json attn = json::array();
    for (auto s = it.snapshots.rbegin(); s != it.snapshots.rend(); ++s) {
        attn.push_back("attn_" + std::to_string(it.index) + "/step_" + std::to_string(s->first) + ".png");
    }
    auto refine_json = [](const RefineSummary& r) {
        return json{{"initial_loss", r.initial_loss}, {"final_loss", r.final_loss}, {"distance", r.distance}};
    };
    json artifacts = {{"image", "iter_" + std::to_string(it.index) + ".png"}, {"attention", attn}};
    artifacts["lut"] = it.lut ? json("lut_" + std::to_string(it.index) + ".cube") : json(nullptr);
    return {{"index", it.index},
            {"role", it.role},
            {"input_index", it.input_index},
            {"description", description_to_json(it.description)},
            {"score", it.score ? json(*it.score) : json(nullptr)},
            {"alpha", it.alpha},
            {"refine", {{"foreground", refine_json(it.fore_refine)}, {"background", refine_json(it.back_refine)}}},
            {"input_edge_loss", it.input_edge_loss},
            {"final_edge_loss", it.final_edge_loss},
            {"edge_trace", trace},
            {"lut", it.lut ? lut_json(*it.lut) : json(nullptr)},
            {"artifacts", artifacts}};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        out << text;
        if (!out) throw IoError("cannot write " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace

json run_to_json(const HarmonizationRun& run) {
    json iterations = json::array();
    for (const auto& it : run.iterations) iterations.push_back(iteration_json(it));
    json decisions = json::array();
    for (const auto& d : run.decisions) {
        json e = {{"after_iteration", d.after_iteration},
                  {"proposed", decision_to_json(d.proposed)},
                  {"applied", decision_to_json(d.applied)},
                  {"source", d.source},
                  {"note", d.note}};
        e["description"] = d.description ? description_to_json(*d.description) : json(nullptr);
        decisions.push_back(std::move(e));
    }
    json descriptions = json::array();
    for (const auto& d : run.descriptions) descriptions.push_back(description_to_json(d));
    json scores = json::array();
    for (const auto& s : run.scores()) scores.push_back(s ? json(*s) : json(nullptr));
    json events = json::array();
    for (const auto& e : run.events) events.push_back({{"seq", e.seq}, {"kind", e.kind}, {"payload", e.payload}});
    json failure = nullptr;
    if (run.status == RunStatus::failed || run.status == RunStatus::cancelled) {
        failure = {{"code", run.failure_code}, {"message", run.failure}};
    }
    return {{"format", "harmonia-run"},
            {"version", 1},
            {"case_id", run.case_id},
            {"config", run.config},
            {"working_size", {run.working_size.width, run.working_size.height}},
            {"original_size", {run.original_size.width, run.original_size.height}},
            {"status", to_string(run.status)},
            {"best_index", run.best_index ? json(*run.best_index) : json(nullptr)},
            {"regenerations", run.regenerations},
            {"evaluator", run.evaluator_id},
            {"warnings", run.warnings},
            {"failure", failure},
            {"path", run.path},
            {"scores", scores},
            {"iterations", iterations},
            {"decisions", decisions},
            {"descriptions", descriptions},
            {"events", events}};
}

void write_iteration_artifacts(const IterationResult& it, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const std::string k = std::to_string(it.index);
    save_png(it.output, dir / ("iter_" + k + ".png"));
    if (!it.snapshots.empty()) {
        const fs::path attn = dir / ("attn_" + k);
        fs::create_directories(attn);
        const Size side{it.attention_side, it.attention_side};
        for (const auto& [step, map] : it.snapshots) {
            std::vector<double> v(map.data(), map.data() + map.size());
            save_gray_png(v, side, attn / ("step_" + std::to_string(step) + ".png"));
        }
    }
    if (it.lut) export_lut(it.lut->lut, dir / ("lut_" + k + ".cube"), "iteration " + k);
}

void write_run_summary(const HarmonizationRun& run, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_text(dir / "run.json", run_to_json(run).dump(2) + "\n");
    json timings = json::array();
    for (const auto& it : run.iterations) timings.push_back({{"index", it.index}, {"seconds", it.duration_s}});
    write_text(dir / "timings.json", json{{"iterations", timings}}.dump(2) + "\n");
}

}  // namespace harmonia
