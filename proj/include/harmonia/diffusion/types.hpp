#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace harmonia::diffusion {

struct LatentShape {
    int channels = 0;
    int height = 0;
    int width = 0;

    int pixels() const noexcept { return height * width; }
    int size() const noexcept { return channels * height * width; }
    friend bool operator==(const LatentShape&, const LatentShape&) = default;
};

/// Channel-major latent tensor (c, y, x) tagged with its schedule index.
/// Index 0 is the clean latent, index T the most noisy one.
struct Latent {
    LatentShape shape;
    Eigen::VectorXd values;
    int step = 0;

    Latent() = default;
    Latent(LatentShape s, int step_index = 0) : shape(s), values(Eigen::VectorXd::Zero(s.size())), step(step_index) {}

    double& at(int c, int y, int x) { return values[(c * shape.height + y) * shape.width + x]; }
    double at(int c, int y, int x) const { return values[(c * shape.height + y) * shape.width + x]; }

    bool finite() const { return values.allFinite(); }
};

enum class TokenTag { special, object, fore_cond, back_cond, filler, null };

const char* to_string(TokenTag tag);

/// Encoded prompt: one embedding row per token plus the role of each token.
struct PromptTokens {
    std::vector<std::string> words;
    std::vector<TokenTag> tags;
    Eigen::MatrixXd embeddings;  // tokens x dim

    int size() const noexcept { return static_cast<int>(tags.size()); }
    std::vector<int> positions(TokenTag tag) const;
};

/// Word order and phrasing used when assembling a prompt from a description.
struct PromptLayout {
    /// "a photo of a <object> in <condition> light" instead of "<object> <condition>".
    bool formal = false;
    /// Put condition words before the object (ablation; default keeps them last).
    bool condition_first = false;
};

struct TaggedWords {
    std::vector<std::string> words;
    std::vector<TokenTag> tags;
};

TaggedWords assemble_prompt(const std::vector<std::string>& object_words,
                            const std::vector<std::string>& condition_words, TokenTag condition_tag,
                            const PromptLayout& layout = {});

struct SamplerConfig {
    int steps = 50;
    double guidance_invert = 0.0;
    double guidance_edit = 2.5;
    std::uint64_t seed = 0;
    /// Fixed-point refinements per inversion step; unset uses the backend's recommendation.
    std::optional<int> inversion_fixed_point_iters;
};

/// Deterministic DDIM schedule over a scaled-linear beta schedule.
class DdimSchedule {
public:
    DdimSchedule(int steps = 50, int train_steps = 1000, double beta_start = 0.00085, double beta_end = 0.012);

    int steps() const noexcept { return steps_; }
    /// Cumulative alpha for schedule index k in [0, steps]; index 0 is exactly 1.
    double alpha_bar(int k) const;
    /// Training timestep used for index k >= 1.
    int timestep(int k) const;

private:
    int steps_;
    int train_steps_;
    std::vector<double> alphas_cumprod_;
};

}  // namespace harmonia::diffusion
