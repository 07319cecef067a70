#pragma once

#include <Eigen/Dense>

#include <cmath>

namespace harmonia {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled
};

/// Adam with decoupled weight decay over one dense parameter block.
class AdamW {
public:
    AdamW(AdamConfig config, Eigen::Index rows, Eigen::Index cols)
        : config_(config), m_(Eigen::MatrixXd::Zero(rows, cols)), v_(Eigen::MatrixXd::Zero(rows, cols)) {}

    void step(Eigen::MatrixXd& param, const Eigen::MatrixXd& grad) {
        ++t_;
        m_ = config_.beta1 * m_ + (1.0 - config_.beta1) * grad;
        v_ = config_.beta2 * v_ + (1.0 - config_.beta2) * grad.cwiseAbs2();
        const double c1 = 1.0 - std::pow(config_.beta1, t_);
        const double c2 = 1.0 - std::pow(config_.beta2, t_);
        if (config_.weight_decay != 0.0) param *= 1.0 - config_.lr * config_.weight_decay;
        param.array() -= config_.lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + config_.eps);
    }

    int steps() const noexcept { return t_; }
    const AdamConfig& config() const noexcept { return config_; }

private:
    AdamConfig config_;
    Eigen::MatrixXd m_;
    Eigen::MatrixXd v_;
    int t_ = 0;
};

}  // namespace harmonia
