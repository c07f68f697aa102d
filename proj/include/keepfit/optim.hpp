#pragma once

#include <cstddef>
#include <vector>

#include "keepfit/nn.hpp"

namespace keepfit::optim {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;
};

/// Adam with decoupled weight decay. Parameters flagged `weight_decay=false`
/// are not decayed.
class AdamW {
public:
    AdamW(nn::ParameterList params, AdamWConfig config);

    /// One update with learning rate `lr`; parameters without a gradient are
    /// still decayed but their moments are left untouched.
    void step(double lr);
    void zero_grad() { nn::zero_grad(params_); }

    std::size_t steps() const { return t_; }
    const nn::ParameterList& parameters() const { return params_; }

    /// Moments, for checkpoint resume.
    std::vector<Tensor>& first_moments() { return m_; }
    std::vector<Tensor>& second_moments() { return v_; }
    void set_steps(std::size_t t) { t_ = t; }

private:
    nn::ParameterList params_;
    AdamWConfig config_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    std::size_t t_ = 0;
};

/// Linear warmup over `warmup_steps` to `peak`, then cosine decay to zero at
/// `total_steps`. lr(warmup_steps - 1) == peak.
class WarmupCosine {
public:
    WarmupCosine(double peak, std::size_t warmup_steps, std::size_t total_steps);
    double lr(std::size_t step) const;

private:
    double peak_;
    std::size_t warmup_;
    std::size_t total_;
};

} // namespace keepfit::optim
