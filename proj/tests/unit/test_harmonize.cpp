#include "harmonia/errors.hpp"
#include "harmonia/fixtures.hpp"
#include "harmonia/harmonize.hpp"
#include "support/replay.hpp"
#include "support/synthetic.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace harmonia;
namespace fs = std::filesystem;

namespace {

constexpr int kSize = 64;

const fixtures::CaseSpec& dusky_lawn() { return fixtures::bundled_cases().at(0); }

CompositeCase working_case(int size = kSize) {
    return resize_to_working(fixtures::render_case(dusky_lawn()), size);
}

RunConfig small_config(int max_iterations = 4) {
    RunConfig c;
    c.working_size = kSize;
    c.decide.max_iterations = max_iterations;
    c.fit_luts = false;
    return c;
}

struct Harness {
    std::unique_ptr<diffusion::DiffusionBackend> backend = diffusion::make_backend({});
    ScriptedProvider provider{dusky_lawn().descriptions, 0};
    std::optional<ScriptedEvaluator> evaluator;
    RunContext ctx;

    explicit Harness(std::optional<std::vector<double>> scores) {
        if (scores) evaluator.emplace(*scores);
        ctx.backend = backend.get();
        ctx.provider = &provider;
        ctx.evaluator = evaluator ? &*evaluator : nullptr;
    }
};

void expect_background_exact(const RasterImage& a, const RasterImage& b, const ForegroundMask& mask) {
    ASSERT_EQ(a.size(), b.size());
    for (int y = 0; y < mask.height(); ++y)
        for (int x = 0; x < mask.width(); ++x)
            if (!mask.at(y, x))
                for (int c = 0; c < 3; ++c) ASSERT_EQ(a.at(y, x, c), b.at(y, x, c)) << y << "," << x;
}

int count_kind(const HarmonizationRun& run, DecisionKind kind) {
    int n = 0;
    for (const auto& d : run.decisions) n += d.applied.kind == kind;
    return n;
}

class FailingProvider final : public DescriptionProvider {
public:
    std::string id() const override { return "failing"; }
    std::vector<std::string> describe(const std::string&, const RasterImage&, const ForegroundMask&, int) override {
        throw std::runtime_error("connection refused");
    }
};

class ScriptedHuman final : public RunObserver {
public:
    std::vector<HumanDecision> script;
    std::vector<std::string> statuses;
    std::optional<HumanDecision> await_decision(const HarmonizationRun& run, const Decision&) override {
        statuses.push_back(to_string(run.status));
        if (script.empty()) return HumanDecision{DecisionKind::Conclude, std::nullopt};
        HumanDecision h = script.front();
        script.erase(script.begin());
        return h;
    }
};

}  // namespace

TEST(SnapshotSchedule, EvenlySpaced) {
    EXPECT_EQ(snapshot_schedule(50, 4), (std::set<int>{50, 34, 17, 1}));
    EXPECT_EQ(snapshot_schedule(50, 1), (std::set<int>{50}));
    EXPECT_TRUE(snapshot_schedule(50, 0).empty());
}

TEST(Iteration, IdentitySwapIsNearNoOp) {
    const auto c = working_case(128);
    auto backend = diffusion::make_backend({});
    const auto d = parse_vlm_response("object: dog | foreground: dusky | background: dusky");
    const IterationResult it = harmonize_iteration(c.image, c.mask, d, *backend, {});
    ASSERT_EQ(it.alpha.size(), 1u);
    EXPECT_DOUBLE_EQ(it.alpha[0], 1.0);
    EXPECT_LE(synth::max_abs_diff(it.output, c.image), 2.0 / 255.0);
}

TEST(Iteration, BackgroundIsBitExact) {
    const auto c = working_case();
    auto backend = diffusion::make_backend({});
    const auto d = parse_vlm_response(dusky_lawn().descriptions[0]);
    const IterationResult it = harmonize_iteration(c.image, c.mask, d, *backend, {});
    expect_background_exact(it.output, c.image, c.mask);
    EXPECT_GT(synth::max_abs_diff(it.output, c.image), 0.0);
    IterationConfig feathered;
    feathered.feather = true;
    const IterationResult f = harmonize_iteration(c.image, c.mask, d, *backend, feathered);
    expect_background_exact(f.output, c.image, c.mask);
}

TEST(Iteration, ForegroundLumaMovesTowardBackground) {
    const auto c = working_case(128);
    auto backend = diffusion::make_backend({});
    const auto d = parse_vlm_response(dusky_lawn().descriptions[0]);
    const IterationResult it = harmonize_iteration(c.image, c.mask, d, *backend, {});
    const double back = region_stats(c.image, c.mask, false).mean_luma;
    const double before = region_stats(c.image, c.mask, true).mean_luma;
    const double after = region_stats(it.output, c.mask, true).mean_luma;
    EXPECT_LT(std::abs(after - back), std::abs(before - back));
}

TEST(Iteration, StageErrorsAreTagged) {
    const auto c = working_case();
    auto backend = diffusion::make_backend({});
    const auto d = parse_vlm_response(dusky_lawn().descriptions[0]);
    try {
        harmonize_iteration(c.image, ForegroundMask(kSize, kSize, 1), d, *backend, {});
        FAIL() << "expected IterationFailed";
    } catch (const IterationFailed& e) {
        EXPECT_EQ(e.stage(), "input");
        EXPECT_EQ(e.cause(), ErrorCode::degenerate_mask);
    }
}

TEST(Run, IncreasingScoresRunToMaxIterations) {
    Harness h(std::vector<double>{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8});
    const auto run = run_harmonization(working_case(), small_config(4), h.ctx);
    ASSERT_EQ(run.status, RunStatus::concluded) << run.failure;
    EXPECT_EQ(run.path.size(), 4u);
    EXPECT_EQ(run.iterations.size(), 3u + 3u);
    EXPECT_EQ(run.path.front(), 2);
    EXPECT_EQ(count_kind(run, DecisionKind::Continue), 3);
    EXPECT_EQ(run.decisions.back().applied.kind, DecisionKind::Conclude);
    EXPECT_EQ(count_kind(run, DecisionKind::Regenerate), 0);
    EXPECT_EQ(run.best_index, 5);
}

TEST(Run, TwoDecreasesRevertAndRegenerateOnce) {
    // Candidates .6 .3 .2 -> fix the first; chain .5 .4 -> regenerate from iteration 0.
    Harness h(std::vector<double>{0.6, 0.3, 0.2, 0.5, 0.4, 0.65, 0.1, 0.1, 0.7});
    const auto run = run_harmonization(working_case(), small_config(4), h.ctx);
    ASSERT_EQ(run.status, RunStatus::concluded) << run.failure;
    EXPECT_EQ(count_kind(run, DecisionKind::Regenerate), 1);
    EXPECT_EQ(run.regenerations, 1);
    const auto& regen = *std::find_if(run.decisions.begin(), run.decisions.end(),
                                      [](const auto& d) { return d.applied.kind == DecisionKind::Regenerate; });
    EXPECT_EQ(regen.applied.revert_to, 0);
    EXPECT_EQ(regen.after_iteration, 4);
    // Revert correctness: every regenerated iteration starts from the best output, not the degraded ones.
    int regenerated = 0;
    for (const auto& it : run.iterations) {
        if (it.role != "regenerated") continue;
        ++regenerated;
        EXPECT_EQ(it.input_index, 0);
        EXPECT_EQ(it.input, run.iterations[0].output);
    }
    EXPECT_EQ(regenerated, 3);
    EXPECT_EQ(run.path, (std::vector<int>{0, 5, 8, 9}));
    EXPECT_EQ(run.iterations[8].input, run.iterations[5].output);
    EXPECT_EQ(*run.best_index, 8);
    EXPECT_TRUE(run.iterations[5].description.same_words(run.iterations[8].description));
}

TEST(Run, UnsuccessfulRegenerationConcludes) {
    Harness h(std::vector<double>{0.6, 0.3, 0.2, 0.5, 0.4, 0.6, 0.1});
    const auto run = run_harmonization(working_case(), small_config(6), h.ctx);
    ASSERT_EQ(run.status, RunStatus::concluded);
    EXPECT_EQ(run.decisions.back().applied.kind, DecisionKind::Conclude);
    EXPECT_FALSE(run.decisions.back().note.empty());
    EXPECT_EQ(*run.best_index, 0);
    EXPECT_EQ(run.final_image, run.iterations[0].output);
}

TEST(Run, BestIndexMatchesFinalImageAndBackgroundHolds) {
    Harness h(std::vector<double>{0.2, 0.9, 0.5, 0.4, 0.3, 0.2});
    const auto c = working_case();
    const auto run = run_harmonization(c, small_config(5), h.ctx);
    ASSERT_EQ(run.status, RunStatus::concluded);
    std::vector<double> s;
    for (const auto& v : run.scores()) s.push_back(*v);
    EXPECT_EQ(*run.best_index, select_initial(s));
    EXPECT_EQ(run.final_image, run.iterations[*run.best_index].output);
    for (const auto& it : run.iterations) expect_background_exact(it.output, c.image, c.mask);
}

TEST(Run, FinalImageAtOriginalResolutionKeepsBackground) {
    Harness h(std::vector<double>{0.5});
    const CompositeCase original = fixtures::render_case(dusky_lawn());
    const auto run = run_harmonization(original, small_config(2), h.ctx);
    ASSERT_EQ(run.status, RunStatus::concluded);
    EXPECT_EQ(run.final_image.size(), original.image.size());
    expect_background_exact(run.final_image, original.image, original.mask);
}

TEST(Run, DeterministicSerialization) {
    auto once = [] {
        Harness h(std::vector<double>{0.3, 0.2, 0.4, 0.5, 0.45, 0.4});
        return run_to_json(run_harmonization(working_case(), small_config(5), h.ctx)).dump();
    };
    EXPECT_EQ(once(), once());
}

TEST(Run, WithoutEvaluatorRunsFixedIterations) {
    Harness h(std::nullopt);
    const auto run = run_harmonization(working_case(), small_config(3), h.ctx);
    ASSERT_EQ(run.status, RunStatus::concluded);
    EXPECT_EQ(run.path.size(), 3u);
    EXPECT_EQ(*run.best_index, run.path.back());
    for (const auto& it : run.iterations) EXPECT_FALSE(it.score.has_value());
    EXPECT_EQ(run.decisions.front().source, "fixed");
}

TEST(Run, ProviderFailureEndsFailedWithCode) {
    Harness h(std::vector<double>{0.5});
    FailingProvider bad;
    h.ctx.provider = &bad;
    const auto run = run_harmonization(working_case(), small_config(), h.ctx);
    EXPECT_EQ(run.status, RunStatus::failed);
    EXPECT_EQ(run.failure_code, "PROVIDER_UNAVAILABLE");
    ASSERT_FALSE(run.events.empty());
    EXPECT_EQ(run.events.back().kind, "failed");
}

TEST(Run, EventsFoldToRunState) {
    Harness h(std::vector<double>{0.6, 0.3, 0.2, 0.5, 0.4, 0.65, 0.1, 0.1, 0.7});
    const auto run = run_harmonization(working_case(), small_config(4), h.ctx);
    const auto j = run_to_json(run);
    std::string why;
    EXPECT_TRUE(replay::same_state(replay::fold(j.at("events")), replay::project(j), &why)) << why;
    for (std::size_t i = 0; i < run.events.size(); ++i) EXPECT_EQ(run.events[i].seq, static_cast<long>(i) + 1);
}

TEST(Run, InteractiveRegenerateUsesUserTripleVerbatim) {
    Harness h(std::vector<double>{0.5, 0.4, 0.3, 0.6, 0.2});
    ScriptedHuman human;
    ConditionDescription user = parse_vlm_response("object: dog | foreground: overbright | background: dusky warm");
    user.provider_id = "human";
    human.script = {{DecisionKind::Regenerate, user}, {DecisionKind::Conclude, std::nullopt}};
    h.ctx.observer = &human;
    RunConfig cfg = small_config(6);
    cfg.interactive = true;
    const auto run = run_harmonization(working_case(), cfg, h.ctx);
    ASSERT_EQ(run.status, RunStatus::concluded) << run.failure;
    EXPECT_EQ(human.statuses, (std::vector<std::string>{"awaiting_human", "awaiting_human"}));
    ASSERT_EQ(run.iterations.size(), 4u);
    const auto& next = run.iterations[3];
    EXPECT_EQ(next.role, "regenerated");
    EXPECT_TRUE(next.description.same_words(user));
    EXPECT_EQ(next.description.format(), user.format());
    EXPECT_EQ(run.decisions[0].source, "human");
    EXPECT_EQ(run.decisions[0].applied.kind, DecisionKind::Regenerate);
    EXPECT_EQ(run.decisions[0].proposed.kind, DecisionKind::Continue);
    const auto j = run_to_json(run);
    std::string why;
    EXPECT_TRUE(replay::same_state(replay::fold(j.at("events")), replay::project(j), &why)) << why;
}

TEST(Run, CancelledByObserver) {
    Harness h(std::vector<double>{0.5});
    struct Cancel : RunObserver {
        bool cancelled() const override { return true; }
    } cancel;
    h.ctx.observer = &cancel;
    const auto run = run_harmonization(working_case(), small_config(), h.ctx);
    EXPECT_EQ(run.status, RunStatus::cancelled);
    EXPECT_EQ(run.events.back().kind, "failed");
}

TEST(Run, WritesRunDirectory) {
    Harness h(std::vector<double>{0.2, 0.3, 0.4, 0.5});
    const fs::path dir = fs::temp_directory_path() / "harmonia_run_dir_test";
    fs::remove_all(dir);
    h.ctx.run_dir = dir;
    RunConfig cfg = small_config(2);
    cfg.fit_luts = true;
    const auto run = run_harmonization(working_case(), cfg, h.ctx);
    ASSERT_EQ(run.status, RunStatus::concluded);
    for (const auto& it : run.iterations) {
        const std::string k = std::to_string(it.index);
        EXPECT_EQ(load_image(dir / ("iter_" + k + ".png")).to_rgb8(), it.output.to_rgb8());
        EXPECT_EQ(import_lut(dir / ("lut_" + k + ".cube")).size, 17);
        EXPECT_TRUE(fs::exists(dir / ("attn_" + k) / "step_50.png"));
    }
    EXPECT_TRUE(fs::exists(dir / "final.png"));
    std::ifstream in(dir / "run.json");
    const auto j = nlohmann::json::parse(in);
    EXPECT_EQ(j.at("status"), "concluded");
    EXPECT_EQ(j, run_to_json(run));
    fs::remove_all(dir);
}

TEST(Multi, SingleMaskMatchesRun) {
    const auto c = working_case();
    Harness a(std::vector<double>{0.3, 0.5, 0.4});
    const auto single = harmonize_multi(c.image, {c.mask}, small_config(2), a.ctx);
    Harness b(std::vector<double>{0.3, 0.5, 0.4});
    const auto direct = run_harmonization(make_case(c.image, c.mask, "instance_0"), small_config(2), b.ctx);
    ASSERT_EQ(single.runs.size(), 1u);
    EXPECT_EQ(single.final_image, direct.final_image);
    EXPECT_EQ(run_to_json(single.runs[0]).dump(), run_to_json(direct).dump());
}

TEST(Multi, DisjointMasksLeaveRestUntouched) {
    const auto c = working_case();
    ForegroundMask left(kSize, kSize), right(kSize, kSize), either(kSize, kSize);
    for (int y = 20; y < 44; ++y)
        for (int x = 0; x < kSize; ++x) {
            if (!c.mask.at(y, x)) continue;
            (x < kSize / 2 ? left : right).at(y, x) = 1;
            either.at(y, x) = 1;
        }
    Harness h(std::vector<double>{0.4, 0.5, 0.3});
    const auto r = harmonize_multi(c.image, {left, right}, small_config(2), h.ctx);
    ASSERT_EQ(r.runs.size(), 2u);
    expect_background_exact(r.final_image, c.image, either);
    EXPECT_GT(synth::max_abs_diff(r.final_image, c.image), 0.0);
}

TEST(Multi, OverlapRejected) {
    const auto c = working_case();
    Harness h(std::vector<double>{0.5});
    EXPECT_THROW(harmonize_multi(c.image, {c.mask, c.mask}, small_config(), h.ctx), MaskOverlapError);
}

TEST(Serialization, DescriptionRoundtrip) {
    const auto d = parse_vlm_response("object: red car | foreground: overbright | background: dusky warm");
    const auto back = description_from_json(description_to_json(d));
    EXPECT_TRUE(back.same_words(d));
    EXPECT_THROW(description_from_json(nlohmann::json{{"object", "dog"}}), ConfigError);
    EXPECT_EQ(run_status_from_string("awaiting_human"), RunStatus::awaiting_human);
}
