#pragma once

#include "harmonia/descriptor.hpp"
#include "harmonia/diffusion/backend.hpp"
#include "harmonia/evaluate.hpp"
#include "harmonia/imagecore.hpp"
#include "harmonia/luts.hpp"
#include "harmonia/preserve.hpp"
#include "harmonia/refine.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace harmonia {

struct IterationConfig {
    diffusion::SamplerConfig sampler;
    RefineConfig refine;
    PreserveConfig preserve;
    diffusion::PromptLayout layout;
    bool feather = false;
    double feather_radius = 3.0;
    int snapshots = 4;  // attention snapshot steps kept per iteration
};

struct RefineSummary {
    double initial_loss = 0.0;  // mean L_Emb at the initial embedding
    double final_loss = 0.0;    // mean L_Emb after refinement
    double distance = 0.0;      // ||E - E_init|| at the last step
};

struct IterationResult {
    int index = 0;
    std::string role;      // candidate | chain | regenerated
    int input_index = -1;  // -1: the composite
    RasterImage input;
    RasterImage output;
    ConditionDescription description;
    std::vector<double> alpha;
    RefineSummary fore_refine;
    RefineSummary back_refine;
    std::vector<NullStepTrace> edge_trace;
    double input_edge_loss = 0.0;  // edge_loss(input, decoded source branch)
    double final_edge_loss = 0.0;
    std::map<int, Eigen::VectorXd> snapshots;  // step -> summed fore-token map
    int attention_side = 0;
    std::optional<double> score;
    std::optional<LutFit> lut;
    double duration_s = 0.0;
};

/// Per-step token plan: source = refined foreground prompt, target = the same
/// with every foreground condition row replaced by the fused background embedding.
EditPlan build_edit_plan(const diffusion::PromptTokens& fore_tokens, const RefinedPromptState& fore,
                         const RefinedPromptState& back, int steps, double guidance,
                         const std::set<int>& snapshot_steps = {});

/// Evenly spaced steps from T down to 1, `count` of them.
std::set<int> snapshot_schedule(int steps, int count);

/// invert -> refine fore/back -> controlled edit -> composite. Any stage
/// error is rethrown as IterationFailed with the stage name.
IterationResult harmonize_iteration(const RasterImage& current, const ForegroundMask& mask,
                                    const ConditionDescription& description, diffusion::DiffusionBackend& backend,
                                    const IterationConfig& cfg, std::shared_ptr<const EdgeDetector> deep = {});

// -- Run loop ----------------------------------------------------------------------

enum class RunStatus { running, awaiting_human, concluded, failed, cancelled };

const char* to_string(RunStatus status);
RunStatus run_status_from_string(const std::string& name);

struct DecisionRecord {
    int after_iteration = 0;
    Decision proposed;
    Decision applied;
    std::string source;  // evaluator | human | fixed
    std::optional<ConditionDescription> description;  // human-supplied triple
    std::string note;
};

struct RunEvent {
    long seq = 0;
    std::string kind;
    nlohmann::json payload;
};

struct HarmonizationRun {
    std::string case_id;
    nlohmann::json config;
    Size working_size;
    Size original_size;
    std::vector<IterationResult> iterations;
    std::vector<int> path;  // iteration indices of the current chain
    std::vector<DecisionRecord> decisions;
    std::vector<ConditionDescription> descriptions;  // every description generated, in order
    RunStatus status = RunStatus::running;
    std::optional<int> best_index;
    int regenerations = 0;
    std::string evaluator_id;
    std::vector<std::string> warnings;
    std::string failure;
    std::string failure_code;
    std::vector<RunEvent> events;
    RasterImage final_image;  // original resolution

    std::vector<std::optional<double>> scores() const;
};

struct HumanDecision {
    DecisionKind kind = DecisionKind::Continue;
    std::optional<ConditionDescription> description;
};

/// Observes a run. Every hook is called on the run's own thread.
class RunObserver {
public:
    virtual ~RunObserver() = default;
    /// Called after the event is appended to run.events.
    virtual void on_event(const HarmonizationRun& run, const RunEvent& event) { (void)run, (void)event; }
    /// Called after each iteration is finished and scored.
    virtual void on_iteration(const HarmonizationRun& run, const IterationResult& it) { (void)run, (void)it; }
    /// Interactive mode only; blocks until a human decides. Returning nullopt cancels the run.
    virtual std::optional<HumanDecision> await_decision(const HarmonizationRun& run, const Decision& proposal) {
        (void)run;
        return HumanDecision{proposal.kind, std::nullopt};
    }
    virtual bool cancelled() const { return false; }
};

struct RunConfig {
    IterationConfig iteration;
    GenerateOptions generate;
    DecideConfig decide;
    bool interactive = false;
    int working_size = 512;
    LutFitConfig lut;
    bool fit_luts = true;
};

struct RunContext {
    diffusion::DiffusionBackend* backend = nullptr;
    DescriptionProvider* provider = nullptr;
    HarmonyEvaluator* evaluator = nullptr;  // null: fixed-iteration mode
    std::shared_ptr<const EdgeDetector> deep;
    RunObserver* observer = nullptr;
    nlohmann::json config_snapshot;  // stored verbatim in run.json
    std::vector<std::string> warnings;
    /// When set, artifacts and run.json are written here as the run progresses.
    std::filesystem::path run_dir;
};

/// Full loop: K candidates from the composite, best one fixed, then
/// Continue / Regenerate / Conclude until done. Errors after retries end the
/// run with status failed and the partial history kept.
HarmonizationRun run_harmonization(const CompositeCase& composite, const RunConfig& cfg, RunContext& ctx);

struct MultiResult {
    RasterImage final_image;
    std::vector<HarmonizationRun> runs;
};

/// One run per mask, each starting from the previous run's final image.
/// Throws MaskOverlapError / MaskShapeError.
MultiResult harmonize_multi(const RasterImage& image, const std::vector<ForegroundMask>& masks,
                            const RunConfig& cfg, RunContext& ctx);

// -- Serialization -----------------------------------------------------------------------

nlohmann::json description_to_json(const ConditionDescription& d);
ConditionDescription description_from_json(const nlohmann::json& j);
nlohmann::json decision_to_json(const Decision& d);

/// Everything but pixel data and timings; keys sorted, no timestamps.
nlohmann::json run_to_json(const HarmonizationRun& run);

/// iter_<k>.png, attn_<k>/step_<t>.png and lut_<k>.cube for one iteration.
void write_iteration_artifacts(const IterationResult& it, const std::filesystem::path& dir);
/// run.json, final.png and timings.json.
void write_run_summary(const HarmonizationRun& run, const std::filesystem::path& dir);

}  // namespace harmonia
