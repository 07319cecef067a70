#pragma once

#include "harmonia/diffusion/backend.hpp"

#include <vector>

namespace harmonia::diffusion {

struct NoisePrediction {
    Latent guided;
    Latent conditional;
    Latent unconditional;
};

/// Classifier-free guidance: (1-s) * eps_null + s * eps_cond.
///
/// The conditional branch is skipped at s == 0 unless a controller is
/// attached (it may want to observe the maps).
NoisePrediction predict_noise(const DiffusionBackend& backend, const Latent& latent, int step,
                              const PromptTokens& tokens, const PromptTokens& null_tokens, double guidance,
                              AttentionController* controller = nullptr);

Latent combine_guidance(const Latent& conditional, const Latent& unconditional, double guidance);

/// Predicted clean latent from z_k and eps.
Latent predicted_x0(const DdimSchedule& schedule, const Latent& latent, int step, const Latent& eps);

/// z_k -> z_{k-1}.
Latent ddim_step(const DdimSchedule& schedule, const Latent& latent, int step, const Latent& eps);

/// z_{k-1} -> z_k; exact inverse of ddim_step for the same eps.
Latent ddim_inverse_step(const DdimSchedule& schedule, const Latent& latent, int step, const Latent& eps);

struct DiffusionTrajectory {
    std::vector<Latent> latents;  // index k holds z_k, k = 0..T
    AttentionStore records;       // conditional maps at each index 1..T
    PromptTokens tokens;
    PromptTokens null_tokens;
    double guidance = 0.0;

    int steps() const noexcept { return static_cast<int>(latents.size()) - 1; }
};

/// DDIM inversion of `image` (prepares the backend session first).
DiffusionTrajectory invert(DiffusionBackend& backend, const RasterImage& image, const PromptTokens& tokens,
                           const SamplerConfig& config);

/// Plain guided DDIM sampling from z_T with fixed tokens.
std::vector<Latent> sample(const DiffusionBackend& backend, const Latent& start, const PromptTokens& tokens,
                           const PromptTokens& null_tokens, double guidance,
                           AttentionController* controller = nullptr);

}  // namespace harmonia::diffusion
