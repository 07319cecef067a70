#pragma once

#include "harmonia/diffusion/attention.hpp"
#include "harmonia/diffusion/types.hpp"
#include "harmonia/imagecore.hpp"

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace harmonia::diffusion {

/// Gradient with respect to an RGB image, laid out like RasterImage::data().
using ImageGradient = std::vector<double>;

/// One session over a latent text-to-image diffusion model.
///
/// A session is single-run-at-a-time: `prepare` binds it to the image being
/// edited and attention hooks are per-call state. Besides the forward pass,
/// a backend exposes vector-Jacobian products for the two paths the
/// optimizers need: decoded image w.r.t. latent, and noise / cross-attention
/// w.r.t. token embeddings.
class DiffusionBackend {
public:
    virtual ~DiffusionBackend() = default;

    virtual std::string name() const = 0;
    virtual LatentShape latent_shape() const = 0;
    virtual int embedding_dim() const = 0;
    /// Side length of the grid `cross_attention` reports at.
    virtual int attention_resolution() const = 0;
    /// Inversion fixed-point iterations used when SamplerConfig leaves it unset.
    virtual int recommended_inversion_iters() const { return 0; }

    /// Binds the session to the image that is about to be inverted.
    virtual void prepare(const RasterImage& reference) = 0;

    virtual Latent encode(const RasterImage& image) const = 0;
    virtual RasterImage decode(const Latent& latent) const = 0;
    /// d<grad, decode(z)>/dz.
    virtual Latent decode_vjp(const Latent& latent, const ImageGradient& grad) const = 0;

    virtual PromptTokens embed_text(const std::vector<std::string>& words,
                                    const std::vector<TokenTag>& tags) const = 0;
    /// Encoding of the empty prompt.
    virtual PromptTokens null_tokens() const = 0;

    /// Single-branch noise prediction at schedule index `step`.
    virtual Latent predict_branch(const Latent& latent, int step, const PromptTokens& tokens, Branch branch,
                                  AttentionController* controller) const = 0;
    /// d<grad_eps, predict_branch(z, tokens)>/d(tokens.embeddings), taken
    /// through the uncontrolled attention path.
    virtual Eigen::MatrixXd predict_branch_vjp(const Latent& latent, int step, const PromptTokens& tokens,
                                               const Latent& grad_eps) const = 0;

    /// Cross-attention aggregated at attention_resolution (pixels x tokens).
    virtual Eigen::MatrixXd cross_attention(const Latent& latent, int step, const PromptTokens& tokens) const = 0;
    /// d<grad_maps, cross_attention(...)>/d(tokens.embeddings).
    virtual Eigen::MatrixXd cross_attention_vjp(const Latent& latent, int step, const PromptTokens& tokens,
                                                const Eigen::MatrixXd& grad_maps) const = 0;

    const DdimSchedule& schedule() const noexcept { return schedule_; }
    void set_steps(int steps) { schedule_ = DdimSchedule(steps); }

protected:
    DdimSchedule schedule_;
};

struct BackendConfig {
    std::string kind = "toy";
    std::filesystem::path weights;
    int steps = 50;
};

/// "toy" is always available. "stable-diffusion" needs an inference runtime
/// this build does not link, so it throws BackendUnavailable.
std::unique_ptr<DiffusionBackend> make_backend(const BackendConfig& config);

}  // namespace harmonia::diffusion
