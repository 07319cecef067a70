#pragma once

#include "harmonia/diffusion/sampler.hpp"
#include "harmonia/errors.hpp"
#include "harmonia/imagecore.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <vector>

namespace harmonia {

enum class RefineStyle { optimizing, training };

const char* to_string(RefineStyle style);

struct RefineConfig {
    RefineStyle style = RefineStyle::optimizing;
    double w = 5000.0;  // weight of ||E - E_init||^2
    double lr = 1e-3;
    int inner_steps = 2;  // optimizing style, per timestep
    int epochs = 50;      // training style
    int batch = 4;        // training style
    bool regularize = true;
    std::uint64_t seed = 0;

    static RefineConfig optimizing_defaults() { return {}; }
    static RefineConfig training_defaults() {
        RefineConfig c;
        c.style = RefineStyle::training;
        c.w = 1000.0;
        c.lr = 1e-2;
        return c;
    }
};

struct AttentionLoss {
    double value = 0.0;
    Eigen::VectorXd grad;  // dL/dAtt per pixel
};

/// mean_p (M_p - Att_p / max(max(Att), 1e-8))^2 with its gradient.
/// Throws DegenerateAttentionError when Att is identically zero.
AttentionLoss attention_objective_with_grad(const Eigen::VectorXd& att, const Eigen::VectorXd& mask);
double attention_objective(const Eigen::VectorXd& att, const Eigen::VectorXd& mask);

/// Area-average onto a side x side grid, then threshold at 0.5. If nothing
/// survives, any block with nonzero coverage counts. Row-major, 0/1 values.
Eigen::VectorXd downsample_mask(const ForegroundMask& mask, int side);

struct StepLoss {
    int step = 0;              // schedule index (optimizing) or epoch (training)
    double at_initial = 0.0;   // L_Emb at the original embedding
    double at_start = 0.0;     // L_Emb when this step began
    double at_end = 0.0;       // L_Emb after this step's updates
    double distance = 0.0;     // ||E - E_init|| after this step
};

struct RefinedPromptState {
    RefineStyle style = RefineStyle::optimizing;
    std::vector<int> positions;             // refined token rows in the prompt
    Eigen::MatrixXd initial;                // positions x dim
    std::map<int, Eigen::MatrixXd> per_step;  // optimizing style
    Eigen::MatrixXd single;                 // training style
    std::vector<double> alpha;              // fusion weights over positions; sums to 1
    std::vector<StepLoss> losses;

    const Eigen::MatrixXd& embeddings_at(int step) const;
    /// `base` with the refined rows written in for schedule index `step`.
    diffusion::PromptTokens tokens_at(const diffusion::PromptTokens& base, int step) const;
};

class RefinementDiverged : public Error {
public:
    RefinementDiverged(const std::string& message, RefinedPromptState last)
        : Error(ErrorCode::refinement_diverged, message), last_(std::move(last)) {}
    const RefinedPromptState& last_finite() const noexcept { return last_; }

private:
    RefinedPromptState last_;
};

/// Optimizing style: walks t = T..1 with a fresh optimizer per timestep,
/// taking cfg.inner_steps updates from the previous timestep's result.
/// With `learn_alpha`, fusion weights are optimized jointly through a softmax.
RefinedPromptState refine_optimizing(const diffusion::DiffusionBackend& backend,
                                     const diffusion::DiffusionTrajectory& trajectory,
                                     const diffusion::PromptTokens& init_tokens, diffusion::TokenTag tag,
                                     const ForegroundMask& region, const RefineConfig& cfg, bool learn_alpha = false);

/// Training style: one embedding set, timesteps as a dataset, shuffled
/// mini-batches for cfg.epochs epochs.
RefinedPromptState refine_training(const diffusion::DiffusionBackend& backend,
                                   const diffusion::DiffusionTrajectory& trajectory,
                                   const diffusion::PromptTokens& init_tokens, diffusion::TokenTag tag,
                                   const ForegroundMask& region, const RefineConfig& cfg, bool learn_alpha = false);

/// Dispatches on cfg.style.
RefinedPromptState refine(const diffusion::DiffusionBackend& backend, const diffusion::DiffusionTrajectory& trajectory,
                          const diffusion::PromptTokens& init_tokens, diffusion::TokenTag tag,
                          const ForegroundMask& region, const RefineConfig& cfg, bool learn_alpha = false);

/// Fusion weights for the background condition tokens, learned jointly with
/// their refinement against the background mask. Throws NoConditionTokens.
std::vector<double> learn_fusion_weights(const diffusion::DiffusionBackend& backend,
                                         const diffusion::DiffusionTrajectory& trajectory,
                                         const diffusion::PromptTokens& back_tokens,
                                         const ForegroundMask& background_mask, const RefineConfig& cfg);

/// sum_n alpha_n * row_n. Throws LengthMismatchError.
Eigen::RowVectorXd fused_background_embedding(const Eigen::MatrixXd& back_embeddings,
                                              const std::vector<double>& alpha);

}  // namespace harmonia
