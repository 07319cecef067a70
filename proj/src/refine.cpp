#include "harmonia/refine.hpp"

#include "harmonia/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace harmonia {

using diffusion::DiffusionBackend;
using diffusion::DiffusionTrajectory;
using diffusion::PromptTokens;
using diffusion::TokenTag;

namespace {

constexpr double kMaxGuard = 1e-8;

Eigen::VectorXd softmax(const Eigen::VectorXd& theta) {
    const Eigen::VectorXd e = (theta.array() - theta.maxCoeff()).exp();
    return e / e.sum();
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

struct Evaluation {
    double loss = 0.0;
    Eigen::MatrixXd grad_e;      // positions x dim
    Eigen::VectorXd grad_alpha;  // positions
};

// L_Emb for one timestep as a function of the refined rows and fusion weights.
class Objective {
public:
    Objective(const DiffusionBackend& backend, const DiffusionTrajectory& trajectory, PromptTokens tokens,
              std::vector<int> positions, Eigen::VectorXd mask)
        : backend_(backend), trajectory_(trajectory), tokens_(std::move(tokens)), positions_(std::move(positions)),
          mask_(std::move(mask)) {}

    Evaluation evaluate(int step, const Eigen::MatrixXd& e, const Eigen::VectorXd& alpha, bool want_grad) {
        for (std::size_t n = 0; n < positions_.size(); ++n) tokens_.embeddings.row(positions_[n]) = e.row(n);
        const auto& latent = trajectory_.latents.at(step);
        const Eigen::MatrixXd maps = backend_.cross_attention(latent, step, tokens_);
        Eigen::VectorXd att = Eigen::VectorXd::Zero(maps.rows());
        for (std::size_t n = 0; n < positions_.size(); ++n) att += alpha[n] * maps.col(positions_[n]);
        const AttentionLoss l = attention_objective_with_grad(att, mask_);
        Evaluation out;
        out.loss = l.value;
        if (!want_grad) return out;
        Eigen::MatrixXd grad_maps = Eigen::MatrixXd::Zero(maps.rows(), maps.cols());
        out.grad_alpha.resize(positions_.size());
        for (std::size_t n = 0; n < positions_.size(); ++n) {
            grad_maps.col(positions_[n]) = alpha[n] * l.grad;
            out.grad_alpha[n] = l.grad.dot(maps.col(positions_[n]));
        }
        const Eigen::MatrixXd full = backend_.cross_attention_vjp(latent, step, tokens_, grad_maps);
        out.grad_e.resize(positions_.size(), full.cols());
        for (std::size_t n = 0; n < positions_.size(); ++n) out.grad_e.row(n) = full.row(positions_[n]);
        return out;
    }

private:
    const DiffusionBackend& backend_;
    const DiffusionTrajectory& trajectory_;
    PromptTokens tokens_;
    std::vector<int> positions_;
    Eigen::VectorXd mask_;
};

struct Setup {
    std::vector<int> positions;
    Eigen::MatrixXd initial;
    Eigen::VectorXd mask;
};

Setup prepare(const DiffusionBackend& backend, const DiffusionTrajectory& trajectory, const PromptTokens& tokens,
              TokenTag tag, const ForegroundMask& region) {
    Setup s;
    s.positions = tokens.positions(tag);
    if (s.positions.empty()) throw NoConditionTokens(std::string("prompt has no ") + to_string(tag) + " tokens");
    if (trajectory.steps() < 1) throw RecordMismatchError("trajectory has no diffusion steps");
    s.initial.resize(static_cast<Eigen::Index>(s.positions.size()), tokens.embeddings.cols());
    for (std::size_t n = 0; n < s.positions.size(); ++n) s.initial.row(n) = tokens.embeddings.row(s.positions[n]);
    s.mask = downsample_mask(region, backend.attention_resolution());
    return s;
}

Eigen::VectorXd alpha_grad_to_theta(const Eigen::VectorXd& alpha, const Eigen::VectorXd& g) {
    return alpha.cwiseProduct(g - Eigen::VectorXd::Constant(g.size(), alpha.dot(g)));
}

bool finite(const Eigen::MatrixXd& m) { return m.allFinite(); }

}  // namespace

const char* to_string(RefineStyle style) {
    return style == RefineStyle::optimizing ? "optimizing" : "training";
}

AttentionLoss attention_objective_with_grad(const Eigen::VectorXd& att, const Eigen::VectorXd& mask) {
    if (att.size() != mask.size() || att.size() == 0) throw LengthMismatchError("attention and mask sizes differ");
    if ((att.array() == 0.0).all()) throw DegenerateAttentionError("attention map is identically zero");
    Eigen::Index arg = 0;
    const double peak = att.maxCoeff(&arg);
    const bool guarded = peak < kMaxGuard;
    const double m = guarded ? kMaxGuard : peak;
    const double p = static_cast<double>(att.size());
    const Eigen::VectorXd r = att / m;
    const Eigen::VectorXd diff = r - mask;
    AttentionLoss out;
    out.value = diff.squaredNorm() / p;
    out.grad = (2.0 / (p * m)) * diff;
    if (!guarded) out.grad[arg] -= (2.0 / (p * m)) * diff.dot(r);
    return out;
}

double attention_objective(const Eigen::VectorXd& att, const Eigen::VectorXd& mask) {
    return attention_objective_with_grad(att, mask).value;
}

Eigen::VectorXd downsample_mask(const ForegroundMask& mask, int side) {
    const int w = mask.width();
    const int h = mask.height();
    Eigen::VectorXd cover = Eigen::VectorXd::Zero(side * side);
    Eigen::VectorXd count = Eigen::VectorXd::Zero(side * side);
    for (int y = 0; y < h; ++y) {
        const int by = static_cast<int>(static_cast<long>(y) * side / h);
        for (int x = 0; x < w; ++x) {
            const int p = by * side + static_cast<int>(static_cast<long>(x) * side / w);
            cover[p] += mask.at(y, x);
            count[p] += 1.0;
        }
    }
    Eigen::VectorXd frac = cover.cwiseQuotient(count.cwiseMax(1.0));
    Eigen::VectorXd out = (frac.array() >= 0.5).cast<double>();
    if (out.sum() == 0.0) out = (frac.array() > 0.0).cast<double>();
    return out;
}

const Eigen::MatrixXd& RefinedPromptState::embeddings_at(int step) const {
    if (style == RefineStyle::training) return single;
    auto it = per_step.find(step);
    if (it == per_step.end()) throw RecordMismatchError("no refined embedding for step " + std::to_string(step));
    return it->second;
}

PromptTokens RefinedPromptState::tokens_at(const PromptTokens& base, int step) const {
    PromptTokens out = base;
    const auto& e = embeddings_at(step);
    for (std::size_t n = 0; n < positions.size(); ++n) out.embeddings.row(positions[n]) = e.row(n);
    return out;
}

RefinedPromptState refine_optimizing(const DiffusionBackend& backend, const DiffusionTrajectory& trajectory,
                                     const PromptTokens& init_tokens, TokenTag tag, const ForegroundMask& region,
                                     const RefineConfig& cfg, bool learn_alpha) {
    const Setup s = prepare(backend, trajectory, init_tokens, tag, region);
    Objective objective(backend, trajectory, init_tokens, s.positions, s.mask);
    const auto n = static_cast<Eigen::Index>(s.positions.size());

    RefinedPromptState state;
    state.style = RefineStyle::optimizing;
    state.positions = s.positions;
    state.initial = s.initial;

    Eigen::MatrixXd e = s.initial;
    Eigen::MatrixXd theta = Eigen::MatrixXd::Zero(n, 1);
    AdamW opt_theta({.lr = cfg.lr}, n, 1);
    const double w = cfg.regularize ? cfg.w : 0.0;

    for (int k = trajectory.steps(); k >= 1; --k) {
        Eigen::VectorXd alpha = softmax(theta.col(0));
        StepLoss log;
        log.step = k;
        log.at_initial = objective.evaluate(k, s.initial, alpha, false).loss;
        log.at_start = objective.evaluate(k, e, alpha, false).loss;
        AdamW opt_e({.lr = cfg.lr}, e.rows(), e.cols());
        for (int i = 0; i < cfg.inner_steps; ++i) {
            const Evaluation ev = objective.evaluate(k, e, alpha, true);
            if (!std::isfinite(ev.loss) || !finite(ev.grad_e)) {
                state.alpha = to_std(alpha);
                throw RefinementDiverged("attention loss became non-finite at step " + std::to_string(k), state);
            }
            const Eigen::MatrixXd grad = ev.grad_e + 2.0 * w * (e - s.initial);
            Eigen::MatrixXd next = e;
            opt_e.step(next, grad);
            if (!finite(next)) {
                state.alpha = to_std(alpha);
                throw RefinementDiverged("embedding became non-finite at step " + std::to_string(k), state);
            }
            e = std::move(next);
            if (learn_alpha && n > 1) {
                opt_theta.step(theta, alpha_grad_to_theta(alpha, ev.grad_alpha));
                alpha = softmax(theta.col(0));
            }
        }
        log.at_end = objective.evaluate(k, e, alpha, false).loss;
        log.distance = (e - s.initial).norm();
        state.losses.push_back(log);
        state.per_step[k] = e;
    }
    state.alpha = to_std(softmax(theta.col(0)));
    return state;
}

RefinedPromptState refine_training(const DiffusionBackend& backend, const DiffusionTrajectory& trajectory,
                                   const PromptTokens& init_tokens, TokenTag tag, const ForegroundMask& region,
                                   const RefineConfig& cfg, bool learn_alpha) {
    const Setup s = prepare(backend, trajectory, init_tokens, tag, region);
    Objective objective(backend, trajectory, init_tokens, s.positions, s.mask);
    const auto n = static_cast<Eigen::Index>(s.positions.size());
    const int steps = trajectory.steps();

    RefinedPromptState state;
    state.style = RefineStyle::training;
    state.positions = s.positions;
    state.initial = s.initial;
    state.single = s.initial;

    Eigen::MatrixXd e = s.initial;
    Eigen::MatrixXd theta = Eigen::MatrixXd::Zero(n, 1);
    AdamW opt_e({.lr = cfg.lr}, e.rows(), e.cols());
    AdamW opt_theta({.lr = cfg.lr}, n, 1);
    const double w = cfg.regularize ? cfg.w : 0.0;
    const int batch = std::max(1, cfg.batch);

    auto mean_loss = [&](const Eigen::MatrixXd& emb, const Eigen::VectorXd& alpha) {
        double sum = 0.0;
        for (int k = 1; k <= steps; ++k) sum += objective.evaluate(k, emb, alpha, false).loss;
        return sum / steps;
    };

    std::vector<int> order(steps);
    std::iota(order.begin(), order.end(), 1);
    std::mt19937_64 rng(cfg.seed ^ 0x5eedULL);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Eigen::VectorXd alpha = softmax(theta.col(0));
        StepLoss log;
        log.step = epoch;
        log.at_initial = mean_loss(s.initial, alpha);
        log.at_start = mean_loss(e, alpha);
        for (int i = steps - 1; i > 0; --i) std::swap(order[i], order[rng() % static_cast<std::uint64_t>(i + 1)]);
        for (int b = 0; b < steps; b += batch) {
            const int end = std::min(steps, b + batch);
            Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(e.rows(), e.cols());
            Eigen::VectorXd grad_alpha = Eigen::VectorXd::Zero(n);
            for (int j = b; j < end; ++j) {
                const Evaluation ev = objective.evaluate(order[j], e, alpha, true);
                if (!std::isfinite(ev.loss) || !finite(ev.grad_e)) {
                    state.single = e;
                    state.alpha = to_std(alpha);
                    throw RefinementDiverged("attention loss became non-finite in epoch " + std::to_string(epoch),
                                             state);
                }
                grad += ev.grad_e;
                grad_alpha += ev.grad_alpha;
            }
            grad /= (end - b);
            grad_alpha /= (end - b);
            grad += 2.0 * w * (e - s.initial);
            Eigen::MatrixXd next = e;
            opt_e.step(next, grad);
            if (!finite(next)) {
                state.single = e;
                state.alpha = to_std(alpha);
                throw RefinementDiverged("embedding became non-finite in epoch " + std::to_string(epoch), state);
            }
            e = std::move(next);
            if (learn_alpha && n > 1) {
                opt_theta.step(theta, alpha_grad_to_theta(alpha, grad_alpha));
                alpha = softmax(theta.col(0));
            }
        }
        log.at_end = mean_loss(e, alpha);
        log.distance = (e - s.initial).norm();
        state.losses.push_back(log);
    }
    state.single = e;
    state.alpha = to_std(softmax(theta.col(0)));
    return state;
}

RefinedPromptState refine(const DiffusionBackend& backend, const DiffusionTrajectory& trajectory,
                          const PromptTokens& init_tokens, TokenTag tag, const ForegroundMask& region,
                          const RefineConfig& cfg, bool learn_alpha) {
    return cfg.style == RefineStyle::optimizing
               ? refine_optimizing(backend, trajectory, init_tokens, tag, region, cfg, learn_alpha)
               : refine_training(backend, trajectory, init_tokens, tag, region, cfg, learn_alpha);
}

std::vector<double> learn_fusion_weights(const DiffusionBackend& backend, const DiffusionTrajectory& trajectory,
                                         const PromptTokens& back_tokens, const ForegroundMask& background_mask,
                                         const RefineConfig& cfg) {
    const auto positions = back_tokens.positions(TokenTag::back_cond);
    if (positions.empty()) throw NoConditionTokens("no background condition tokens to fuse");
    if (positions.size() == 1) return {1.0};
    return refine(backend, trajectory, back_tokens, TokenTag::back_cond, background_mask, cfg, true).alpha;
}

Eigen::RowVectorXd fused_background_embedding(const Eigen::MatrixXd& back_embeddings, const std::vector<double>& alpha) {
    if (static_cast<Eigen::Index>(alpha.size()) != back_embeddings.rows() || alpha.empty()) {
        throw LengthMismatchError("fusion weights and embeddings differ in length");
    }
    Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(back_embeddings.cols());
    for (std::size_t n = 0; n < alpha.size(); ++n) out += alpha[n] * back_embeddings.row(n);
    return out;
}

}  // namespace harmonia
