#include "keepfit/optim.hpp"

#include <cmath>
#include <numbers>

namespace keepfit::optim {

AdamW::AdamW(nn::ParameterList params, AdamWConfig config) : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
        m_.emplace_back(p.var.value().shape());
        v_.emplace_back(p.var.value().shape());
    }
}

void AdamW::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        ag::Var var = params_[i].var;
        Tensor& w = var.mutable_value();
        if (params_[i].weight_decay && config_.weight_decay > 0.0) {
            const double shrink = 1.0 - lr * config_.weight_decay;
            for (auto& x : w.storage()) x *= shrink;
        }
        const Tensor& g = var.grad();
        if (g.empty()) continue;
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
            m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * g[k];
            v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * g[k] * g[k];
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            w[k] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
        }
    }
}

WarmupCosine::WarmupCosine(double peak, std::size_t warmup_steps, std::size_t total_steps)
    : peak_(peak), warmup_(warmup_steps), total_(total_steps) {}

double WarmupCosine::lr(std::size_t step) const {
    if (step < warmup_) return peak_ * static_cast<double>(step + 1) / static_cast<double>(warmup_);
    if (total_ <= warmup_) return peak_;
    const double progress =
        std::min(1.0, static_cast<double>(step - warmup_) / static_cast<double>(total_ - warmup_));
    return peak_ * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

} // namespace keepfit::optim
