#pragma once

#include "harmonia/diffusion/sampler.hpp"
#include "harmonia/imagecore.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace harmonia {

struct EdgeMap {
    int width = 0;
    int height = 0;
    std::vector<double> values;  // row-major

    EdgeMap() = default;
    EdgeMap(int w, int h) : width(w), height(h), values(static_cast<std::size_t>(w) * h, 0.0) {}

    double& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
    double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
    Size size() const noexcept { return {width, height}; }
};

enum class SobelMode { signed_sum, magnitude };

const char* to_string(SobelMode mode);
SobelMode sobel_mode_from_string(const std::string& name);

/// 3x3 Sobel on Rec.601 luma, true convolution, reflect-101 borders.
/// signed_sum: I*Kh + I*Kv. magnitude: sqrt((I*Kh)^2 + (I*Kv)^2).
EdgeMap sobel_edges(const RasterImage& image, SobelMode mode = SobelMode::signed_sum);
EdgeMap sobel_edges_luma(const std::vector<double>& luma, Size size, SobelMode mode = SobelMode::signed_sum);

/// d<grad, sobel_edges(image)>/d(image), interleaved RGB like RasterImage::data().
std::vector<double> sobel_edges_vjp(const RasterImage& image, const EdgeMap& grad,
                                    SobelMode mode = SobelMode::signed_sum);

/// Largest |response| any image in [0,1] can produce.
double sobel_bound(SobelMode mode);

class EdgeDetector {
public:
    virtual ~EdgeDetector() = default;
    virtual std::string id() const = 0;
    /// Edge probability per pixel in [0,1].
    virtual EdgeMap detect(const RasterImage& image) const = 0;
    /// Gradient of <grad, detect(image)> w.r.t. the image; nullopt when the
    /// detector cannot differentiate.
    virtual std::optional<std::vector<double>> detect_vjp(const RasterImage& image, const EdgeMap& grad) const = 0;
};

/// |E_S| / sobel_bound: the stand-in used when no deep detector is loaded.
class SobelFallbackDetector final : public EdgeDetector {
public:
    explicit SobelFallbackDetector(SobelMode mode = SobelMode::signed_sum) : mode_(mode) {}
    std::string id() const override { return "sobel-fallback"; }
    EdgeMap detect(const RasterImage& image) const override;
    std::optional<std::vector<double>> detect_vjp(const RasterImage& image, const EdgeMap& grad) const override;

private:
    SobelMode mode_;
};

/// Shared library exposing
///   int harmonia_edge_detect(const float* rgb, int w, int h, float* out);
/// and optionally
///   int harmonia_edge_detect_vjp(const float* rgb, int w, int h,
///                                const float* grad_out, float* grad_rgb);
/// Both return 0 on success.
class PluginEdgeDetector final : public EdgeDetector {
public:
    /// Throws IoError when the library or its entry point cannot be loaded.
    explicit PluginEdgeDetector(const std::filesystem::path& library);
    ~PluginEdgeDetector() override;
    PluginEdgeDetector(const PluginEdgeDetector&) = delete;
    PluginEdgeDetector& operator=(const PluginEdgeDetector&) = delete;

    std::string id() const override;
    EdgeMap detect(const RasterImage& image) const override;
    std::optional<std::vector<double>> detect_vjp(const RasterImage& image, const EdgeMap& grad) const override;
    bool differentiable() const noexcept { return vjp_ != nullptr; }

private:
    using DetectFn = int (*)(const float*, int, int, float*);
    using VjpFn = int (*)(const float*, int, int, const float*, float*);

    std::filesystem::path path_;
    void* handle_ = nullptr;
    DetectFn detect_ = nullptr;
    VjpFn vjp_ = nullptr;
};

struct LoadedDetector {
    std::shared_ptr<const EdgeDetector> detector;
    std::vector<std::string> warnings;
};

/// Loads the plugin if `library` is set and loadable, else the Sobel
/// fallback with a recorded warning.
LoadedDetector load_edge_detector(const std::optional<std::filesystem::path>& library,
                                  SobelMode fallback_mode = SobelMode::signed_sum);

EdgeMap deep_edges(const RasterImage& image, const EdgeDetector& detector);

struct PreserveConfig {
    double gamma = 0.1;
    SobelMode sobel_mode = SobelMode::signed_sum;
    bool freeze_cross_attention = true;
    bool inject_self_attention = true;
    /// Share of denoising steps, counted from the noisiest, with self-attention injection.
    double self_attention_fraction = 1.0;
    bool edge_constraint = true;
    double null_lr = 1e-4;
    int null_inner_steps = 10;
    std::optional<std::filesystem::path> edge_plugin;

    static constexpr double kPainterlyFraction = 0.6;
    void make_painterly() { self_attention_fraction = kPainterlyFraction; }
};

/// Schedule indices T, T-1, ... covering round(fraction * T) steps.
std::set<int> self_attention_steps(int steps, double fraction);

struct EdgeLoss {
    double value = 0.0;
    double sobel_term = 0.0;
    double deep_term = 0.0;
    std::vector<double> grad;  // w.r.t. the candidate image, interleaved RGB
};

/// mean (E_S(I) - E_S(I'))^2 + gamma * mean (E_D(I) - E_D(I'))^2 against a fixed I.
class EdgeObjective {
public:
    EdgeObjective(const RasterImage& original, double gamma, SobelMode mode,
                  std::shared_ptr<const EdgeDetector> deep);

    EdgeLoss evaluate(const RasterImage& candidate, bool want_grad) const;
    double value(const RasterImage& candidate) const { return evaluate(candidate, false).value; }
    /// False when gamma > 0 but the detector gives no gradient; the deep term
    /// then enters the value only.
    bool deep_term_differentiable() const noexcept { return deep_differentiable_; }

private:
    double gamma_;
    SobelMode mode_;
    std::shared_ptr<const EdgeDetector> deep_;
    EdgeMap sobel_ref_;
    EdgeMap deep_ref_;
    bool deep_differentiable_ = true;
};

double edge_loss(const RasterImage& original, const RasterImage& candidate, double gamma,
                 const EdgeDetector& deep, SobelMode mode = SobelMode::signed_sum);
/// Uses the Sobel fallback as the deep detector.
double edge_loss(const RasterImage& original, const RasterImage& candidate, double gamma = 0.1,
                 SobelMode mode = SobelMode::signed_sum);

/// Prompt-to-prompt control for the edited branch.
///
/// Conditional branch only. Cross-attention: columns at `replaced` take the
/// source maps; the other columns keep their ratios and are rescaled so each
/// row still sums to 1. Self-attention: replaced by the source map at steps
/// in `self_steps`.
class EditController final : public diffusion::AttentionController {
public:
    EditController(std::vector<int> replaced, std::set<int> self_steps, bool replace_cross = true);

    void set_source(const diffusion::AttentionRecord* record) { source_ = record; }
    void on_attention(const diffusion::AttentionSite& site, Eigen::MatrixXd& probs) override;

private:
    std::vector<int> replaced_;
    std::set<int> self_steps_;
    bool replace_cross_;
    const diffusion::AttentionRecord* source_ = nullptr;
};

EditController make_edit_controller(const std::vector<int>& replaced, const PreserveConfig& cfg, int steps);

/// Tokens for the two branches of an edit, indexed by schedule step 1..T
/// (index 0 unused).
struct EditPlan {
    std::vector<diffusion::PromptTokens> source;
    std::vector<diffusion::PromptTokens> target;
    std::vector<int> replaced;  // target positions whose maps come from the source
    double guidance = 2.5;
    std::set<int> snapshot_steps;  // steps whose replaced-token maps are kept
};

struct NullStepTrace {
    int step = 0;
    double loss_before = 0.0;
    double loss_after = 0.0;
    int iterations = 0;
    bool flagged = false;  // a non-finite iterate was discarded
};

/// One timestep of null-text optimization on the edited branch.
///
/// `eps_cond` is the (controlled) conditional prediction at `latent`; the
/// unconditional branch is re-evaluated for each candidate null embedding.
/// Returns the best iterate seen, starting point included.
struct NullStepResult {
    diffusion::PromptTokens null_tokens;
    NullStepTrace trace;
};
NullStepResult optimize_null_step(const diffusion::DiffusionBackend& backend, const diffusion::Latent& latent,
                                  int step, const diffusion::Latent& eps_cond,
                                  const diffusion::PromptTokens& null_start, double guidance,
                                  const EdgeObjective& objective, const PreserveConfig& cfg);

struct EditResult {
    diffusion::Latent source_final;
    diffusion::Latent target_final;
    RasterImage source_image;
    RasterImage target_image;
    std::vector<diffusion::PromptTokens> null_tokens;  // per step, index 1..T
    std::vector<NullStepTrace> null_trace;              // in denoising order
    std::map<int, Eigen::VectorXd> snapshots;           // summed replaced-token maps
    double final_edge_loss = 0.0;                       // edge_loss(original, target_image)
};

/// Joint denoising of source and target from the inverted z_T with
/// prompt-to-prompt control on the target and per-step null-text
/// optimization of the edge objective on the target's decoded x0.
EditResult run_edit(const diffusion::DiffusionBackend& backend, const diffusion::DiffusionTrajectory& trajectory,
                    const EditPlan& plan, const RasterImage& original, const PreserveConfig& cfg,
                    std::shared_ptr<const EdgeDetector> deep);

}  // namespace harmonia
