#include "harmonia/diffusion/sampler.hpp"

#include "harmonia/errors.hpp"

#include <cmath>

namespace harmonia::diffusion {

Latent combine_guidance(const Latent& conditional, const Latent& unconditional, double guidance) {
    Latent out(unconditional.shape, unconditional.step);
    if (guidance == 0.0) {
        out.values = unconditional.values;
    } else if (guidance == 1.0) {
        out.values = conditional.values;
    } else {
        out.values = (1.0 - guidance) * unconditional.values + guidance * conditional.values;
    }
    return out;
}

NoisePrediction predict_noise(const DiffusionBackend& backend, const Latent& latent, int step,
                              const PromptTokens& tokens, const PromptTokens& null_tokens, double guidance,
                              AttentionController* controller) {
    if (guidance < 0.0) throw ConfigError("guidance scale must be >= 0");
    NoisePrediction p;
    p.unconditional = backend.predict_branch(latent, step, null_tokens, Branch::unconditional, controller);
    if (guidance != 0.0 || controller != nullptr) {
        p.conditional = backend.predict_branch(latent, step, tokens, Branch::conditional, controller);
    } else {
        p.conditional = p.unconditional;
    }
    p.guided = combine_guidance(p.conditional, p.unconditional, guidance);
    return p;
}

Latent predicted_x0(const DdimSchedule& schedule, const Latent& latent, int step, const Latent& eps) {
    const double a = schedule.alpha_bar(step);
    Latent out(latent.shape, 0);
    out.values = (latent.values - std::sqrt(1.0 - a) * eps.values) / std::sqrt(a);
    return out;
}

Latent ddim_step(const DdimSchedule& schedule, const Latent& latent, int step, const Latent& eps) {
    if (step < 1 || step > schedule.steps()) throw ConfigError("ddim_step index out of range");
    const double a_prev = schedule.alpha_bar(step - 1);
    const Latent x0 = predicted_x0(schedule, latent, step, eps);
    Latent out(latent.shape, step - 1);
    out.values = std::sqrt(a_prev) * x0.values + std::sqrt(1.0 - a_prev) * eps.values;
    if (!out.finite()) throw BackendNumericsError("non-finite latent in ddim_step");
    return out;
}

Latent ddim_inverse_step(const DdimSchedule& schedule, const Latent& latent, int step, const Latent& eps) {
    if (step < 1 || step > schedule.steps()) throw ConfigError("ddim_inverse_step index out of range");
    const double a_prev = schedule.alpha_bar(step - 1);
    const double a = schedule.alpha_bar(step);
    Latent out(latent.shape, step);
    const Eigen::VectorXd x0 = (latent.values - std::sqrt(1.0 - a_prev) * eps.values) / std::sqrt(a_prev);
    out.values = std::sqrt(a) * x0 + std::sqrt(1.0 - a) * eps.values;
    if (!out.finite()) throw BackendNumericsError("non-finite latent in ddim_inverse_step");
    return out;
}

DiffusionTrajectory invert(DiffusionBackend& backend, const RasterImage& image, const PromptTokens& tokens,
                           const SamplerConfig& config) {
    if (backend.schedule().steps() != config.steps) backend.set_steps(config.steps);
    backend.prepare(image);
    const auto& schedule = backend.schedule();
    const int iters = config.inversion_fixed_point_iters.value_or(backend.recommended_inversion_iters());

    DiffusionTrajectory traj;
    traj.tokens = tokens;
    traj.null_tokens = backend.null_tokens();
    traj.guidance = config.guidance_invert;
    traj.latents.reserve(config.steps + 1);
    traj.latents.push_back(backend.encode(image));

    for (int k = 1; k <= config.steps; ++k) {
        const Latent& prev = traj.latents.back();
        Latent at_prev = prev;
        at_prev.step = k;
        // First estimate uses the noise at the previous latent, then refine
        // toward the fixed point z_k = inverse(z_{k-1}, eps(z_k)).
        Latent eps = predict_noise(backend, at_prev, k, tokens, traj.null_tokens, config.guidance_invert).guided;
        Latent next = ddim_inverse_step(schedule, prev, k, eps);
        for (int i = 0; i < iters; ++i) {
            eps = predict_noise(backend, next, k, tokens, traj.null_tokens, config.guidance_invert).guided;
            next = ddim_inverse_step(schedule, prev, k, eps);
        }
        RecordingController recorder(traj.records);
        predict_noise(backend, next, k, tokens, traj.null_tokens, config.guidance_invert, &recorder);
        traj.latents.push_back(std::move(next));
    }
    return traj;
}

std::vector<Latent> sample(const DiffusionBackend& backend, const Latent& start, const PromptTokens& tokens,
                           const PromptTokens& null_tokens, double guidance, AttentionController* controller) {
    const auto& schedule = backend.schedule();
    std::vector<Latent> out(static_cast<std::size_t>(start.step) + 1);
    out[start.step] = start;
    for (int k = start.step; k >= 1; --k) {
        const Latent eps = predict_noise(backend, out[k], k, tokens, null_tokens, guidance, controller).guided;
        out[k - 1] = ddim_step(schedule, out[k], k, eps);
    }
    return out;
}

}  // namespace harmonia::diffusion
