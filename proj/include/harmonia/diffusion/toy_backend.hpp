#pragma once

#include "harmonia/diffusion/backend.hpp"

#include <array>
#include <cstdint>
#include <optional>

namespace harmonia::diffusion {

struct ToyBackendOptions {
    int latent_side = 16;
    int embedding_dim = 16;  // first 3 dims carry an RGB colour direction
    int key_dim = 8;
    double text_strength = 0.02;
    double self_blend = 0.3;
    double sink_bias = 1.5;  // extra logit for the start token
    double query_gain = 1.2;
    double key_scale = 0.005;  // half-range of the hashed key dims; key weights divide by it
    double self_temperature = 4.0;
    std::uint64_t weight_seed = 20240229;
};

/// Deterministic stand-in for a latent diffusion model with exact oracles.
///
/// Latent: 4 x 16 x 16. Channels 0..2 are block means of RGB mapped to
/// [-1,1], channel 3 is luma. The decoder upsamples and adds back the
/// high-frequency residual of the prepared reference image, so
/// decode(encode(x)) == x for the reference.
///
/// Noise model at index k with a = alpha_bar(k):
///   eps = sqrt(1-a) * ((1-b) z + b S z) - c sqrt(1-a) Wv o(tokens)
/// where S is a self-attention matrix and o the mean cross-attention output
/// over three layers (two at 16x16, one at 8x8). Queries are a fixed
/// function of the reference image's colours and positions, so attention
/// correlates with regions of distinct colour and eps is affine in z.
class ToyBackend final : public DiffusionBackend {
public:
    explicit ToyBackend(ToyBackendOptions options = {});

    std::string name() const override { return "toy"; }
    LatentShape latent_shape() const override;
    int embedding_dim() const override { return options_.embedding_dim; }
    int attention_resolution() const override { return options_.latent_side; }
    int recommended_inversion_iters() const override { return 8; }

    void prepare(const RasterImage& reference) override;

    Latent encode(const RasterImage& image) const override;
    RasterImage decode(const Latent& latent) const override;
    Latent decode_vjp(const Latent& latent, const ImageGradient& grad) const override;

    PromptTokens embed_text(const std::vector<std::string>& words,
                            const std::vector<TokenTag>& tags) const override;
    PromptTokens null_tokens() const override;

    Latent predict_branch(const Latent& latent, int step, const PromptTokens& tokens, Branch branch,
                          AttentionController* controller) const override;
    Eigen::MatrixXd predict_branch_vjp(const Latent& latent, int step, const PromptTokens& tokens,
                                       const Latent& grad_eps) const override;

    Eigen::MatrixXd cross_attention(const Latent& latent, int step, const PromptTokens& tokens) const override;
    Eigen::MatrixXd cross_attention_vjp(const Latent& latent, int step, const PromptTokens& tokens,
                                        const Eigen::MatrixXd& grad_maps) const override;

    /// Overrides the query features with a caller-supplied field
    /// (pixels x 8), e.g. one built directly from a mask.
    void set_query_features(const Eigen::MatrixXd& features);
    const Eigen::MatrixXd& query_features() const noexcept { return features_; }

    /// RGB direction a condition word pushes colours toward.
    static std::array<double, 3> word_color(const std::string& word);

    static constexpr int kCrossLayers = 3;
    static constexpr int kFeatureDim = 8;

private:
    struct CrossLayer {
        int side = 0;
        Eigen::MatrixXd query_weights;  // key_dim x feature
        Eigen::MatrixXd key_weights;    // key_dim x (embedding_dim - 3)
        Eigen::MatrixXd queries;        // pixels(side) x key_dim
    };

    void rebuild_queries();
    Eigen::MatrixXd logits(const CrossLayer& layer, int step, const PromptTokens& tokens) const;
    double step_sharpness(int step) const;
    double sqrt_one_minus_alpha(int step) const;
    Eigen::VectorXd bias_for(const PromptTokens& tokens) const;
    void check_tokens(const PromptTokens& tokens) const;

    ToyBackendOptions options_;
    std::array<CrossLayer, kCrossLayers> cross_;
    Eigen::MatrixXd self_query_weights_;  // key_dim x feature
    Eigen::MatrixXd self_probs_;          // pixels x pixels
    Eigen::MatrixXd features_;            // pixels x feature
    Eigen::Matrix<double, 4, 3> value_map_;

    Size reference_size_;
    std::vector<double> residual_;  // reference minus its block-mean upsample
};

}  // namespace harmonia::diffusion
