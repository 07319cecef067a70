#include "harmonia/errors.hpp"
#include "harmonia/optim.hpp"
#include "harmonia/preserve.hpp"

#include <cmath>
#include <limits>

namespace harmonia {

using diffusion::AttentionKind;
using diffusion::AttentionRecord;
using diffusion::AttentionSite;
using diffusion::AttentionStore;
using diffusion::Branch;
using diffusion::DiffusionBackend;
using diffusion::DiffusionTrajectory;
using diffusion::Latent;
using diffusion::PromptTokens;
using diffusion::RecordingController;

EditController::EditController(std::vector<int> replaced, std::set<int> self_steps, bool replace_cross)
    : replaced_(std::move(replaced)), self_steps_(std::move(self_steps)), replace_cross_(replace_cross) {}

void EditController::on_attention(const AttentionSite& site, Eigen::MatrixXd& probs) {
    if (site.branch != Branch::conditional) return;
    const bool wants_cross = site.kind == AttentionKind::cross && replace_cross_ && !replaced_.empty();
    const bool wants_self = site.kind == AttentionKind::self && self_steps_.count(site.step) != 0;
    if (!wants_cross && !wants_self) return;
    if (source_ == nullptr) throw RecordMismatchError("edit controller has no source record");
    const auto* src = source_->find(site.kind, site.layer);
    if (src == nullptr || src->probs.rows() != probs.rows() || src->probs.cols() != probs.cols()) {
        throw RecordMismatchError("source attention does not match layer " + std::to_string(site.layer) +
                                  " at step " + std::to_string(site.step));
    }
    if (wants_self) {
        probs = src->probs;
        return;
    }
    std::vector<bool> is_replaced(static_cast<std::size_t>(probs.cols()), false);
    for (int p : replaced_) {
        if (p < 0 || p >= probs.cols()) throw RecordMismatchError("replaced token position out of range");
        is_replaced[p] = true;
    }
    const auto others = static_cast<double>(probs.cols()) - static_cast<double>(replaced_.size());
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
        double taken = 0.0;
        double rest = 0.0;
        for (Eigen::Index c = 0; c < probs.cols(); ++c) {
            if (is_replaced[c]) {
                probs(r, c) = src->probs(r, c);
                taken += probs(r, c);
            } else {
                rest += probs(r, c);
            }
        }
        const double left = std::max(0.0, 1.0 - taken);
        for (Eigen::Index c = 0; c < probs.cols(); ++c) {
            if (is_replaced[c]) continue;
            probs(r, c) = rest > 0.0 ? probs(r, c) * left / rest : left / others;
        }
    }
}

EditController make_edit_controller(const std::vector<int>& replaced, const PreserveConfig& cfg, int steps) {
    std::set<int> self_steps;
    if (cfg.inject_self_attention) self_steps = self_attention_steps(steps, cfg.self_attention_fraction);
    return EditController(replaced, std::move(self_steps), cfg.freeze_cross_attention);
}

NullStepResult optimize_null_step(const DiffusionBackend& backend, const Latent& latent, int step,
                                  const Latent& eps_cond, const PromptTokens& null_start, double guidance,
                                  const EdgeObjective& objective, const PreserveConfig& cfg) {
    const auto& schedule = backend.schedule();
    const double a = schedule.alpha_bar(step);
    const double dx0_deps = -std::sqrt(1.0 - a) / std::sqrt(a);
    const double deps_duncond = 1.0 - guidance;

    NullStepResult out;
    out.null_tokens = null_start;
    out.trace.step = step;

    struct Eval {
        double loss;
        Eigen::MatrixXd grad;
    };
    auto evaluate = [&](const PromptTokens& null_tokens, bool want_grad) {
        const Latent eps_u = backend.predict_branch(latent, step, null_tokens, Branch::unconditional, nullptr);
        const Latent eps = diffusion::combine_guidance(eps_cond, eps_u, guidance);
        const Latent x0 = diffusion::predicted_x0(schedule, latent, step, eps);
        const EdgeLoss l = objective.evaluate(backend.decode(x0), want_grad);
        Eval e{l.value, {}};
        if (want_grad) {
            Latent g = backend.decode_vjp(x0, l.grad);
            g.values *= dx0_deps * deps_duncond;
            e.grad = backend.predict_branch_vjp(latent, step, null_tokens, g);
        }
        return e;
    };

    PromptTokens current = null_start;
    const int n = guidance == 1.0 ? 0 : std::max(0, cfg.null_inner_steps);
    AdamW opt({.lr = cfg.null_lr}, current.embeddings.rows(), current.embeddings.cols());
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i <= n; ++i) {
        const Eval e = evaluate(current, i < n);
        if (!std::isfinite(e.loss) || (i < n && !e.grad.allFinite())) {
            out.trace.flagged = true;
            break;
        }
        if (i == 0) out.trace.loss_before = e.loss;
        if (e.loss < best) {
            best = e.loss;
            out.null_tokens = current;
        }
        if (i == n) break;
        opt.step(current.embeddings, e.grad);
        out.trace.iterations = i + 1;
        if (!current.embeddings.allFinite()) {
            out.trace.flagged = true;
            break;
        }
    }
    out.trace.loss_after = best;
    return out;
}

EditResult run_edit(const DiffusionBackend& backend, const DiffusionTrajectory& trajectory, const EditPlan& plan,
                    const RasterImage& original, const PreserveConfig& cfg,
                    std::shared_ptr<const EdgeDetector> deep) {
    const int steps = trajectory.steps();
    if (steps < 1) throw RecordMismatchError("trajectory has no diffusion steps");
    if (static_cast<int>(plan.source.size()) != steps + 1 || static_cast<int>(plan.target.size()) != steps + 1) {
        throw RecordMismatchError("edit plan does not cover every diffusion step");
    }
    if (plan.guidance < 0.0) throw ConfigError("guidance scale must be >= 0");
    const auto& schedule = backend.schedule();
    const EdgeObjective objective(original, cfg.gamma, cfg.sobel_mode, std::move(deep));
    EditController controller = make_edit_controller(plan.replaced, cfg, steps);
    const bool optimize_null = cfg.edge_constraint && cfg.null_inner_steps > 0;

    EditResult result;
    result.null_tokens.resize(steps + 1);
    Latent z_src = trajectory.latents.at(steps);
    Latent z_tgt = z_src;
    PromptTokens null_tokens = trajectory.null_tokens;

    for (int k = steps; k >= 1; --k) {
        AttentionStore store;
        RecordingController recorder(store);
        const Latent src_c = backend.predict_branch(z_src, k, plan.source[k], Branch::conditional, &recorder);
        controller.set_source(store.at(k));
        const Latent tgt_c = backend.predict_branch(z_tgt, k, plan.target[k], Branch::conditional, &controller);
        controller.set_source(nullptr);

        if (plan.snapshot_steps.count(k) != 0 && store.at(k) != nullptr) {
            const Eigen::MatrixXd maps = store.at(k)->aggregated_cross(backend.attention_resolution());
            Eigen::VectorXd sum = Eigen::VectorXd::Zero(maps.rows());
            for (int p : plan.replaced) sum += maps.col(p);
            result.snapshots[k] = std::move(sum);
        }

        if (optimize_null) {
            NullStepResult r =
                optimize_null_step(backend, z_tgt, k, tgt_c, null_tokens, plan.guidance, objective, cfg);
            null_tokens = std::move(r.null_tokens);
            result.null_trace.push_back(r.trace);
        }
        result.null_tokens[k] = null_tokens;

        const Latent src_u = backend.predict_branch(z_src, k, null_tokens, Branch::unconditional, nullptr);
        const Latent tgt_u = backend.predict_branch(z_tgt, k, null_tokens, Branch::unconditional, nullptr);
        z_src = diffusion::ddim_step(schedule, z_src, k, diffusion::combine_guidance(src_c, src_u, plan.guidance));
        z_tgt = diffusion::ddim_step(schedule, z_tgt, k, diffusion::combine_guidance(tgt_c, tgt_u, plan.guidance));
    }

    result.source_final = z_src;
    result.target_final = z_tgt;
    result.source_image = backend.decode(z_src);
    result.target_image = backend.decode(z_tgt);
    result.final_edge_loss = objective.value(result.target_image);
    return result;
}

}  // namespace harmonia
