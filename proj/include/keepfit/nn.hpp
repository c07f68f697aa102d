#pragma once

#include <string>
#include <vector>

#include "keepfit/autograd.hpp"
#include "keepfit/rng.hpp"

namespace keepfit::nn {

using ag::Var;

struct NamedParameter {
    std::string name;
    Var var;
    bool weight_decay = true;
};

using ParameterList = std::vector<NamedParameter>;

/// Stable checksum over parameter names, shapes and values.
std::uint64_t checksum(const ParameterList& params);
void zero_grad(const ParameterList& params);
/// Prepend `prefix.` to every name.
void append(ParameterList& into, const ParameterList& from, const std::string& prefix);

Tensor normal_tensor(Shape shape, double stddev, Rng& rng);

/// y = x W + b with W stored [in, out].
class Linear {
public:
    Linear() = default;
    Linear(std::size_t in, std::size_t out, bool bias, Rng& rng);

    Var forward(const Var& x) const;
    ParameterList parameters() const;

    std::size_t in_features() const { return weight_.value().dim(0); }
    std::size_t out_features() const { return weight_.value().dim(1); }
    Var& weight() { return weight_; }
    Var& bias() { return bias_; }

private:
    Var weight_;
    Var bias_;
};

/// NHWC convolution, weight [k, k, in, out].
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t pad, Rng& rng);

    Var forward(const Var& x) const;
    ParameterList parameters() const;
    std::size_t stride() const { return stride_; }
    std::size_t out_channels() const { return weight_.value().dim(3); }

private:
    Var weight_;
    Var bias_;
    std::size_t stride_ = 1;
    std::size_t pad_ = 0;
};

class LayerNorm {
public:
    LayerNorm() = default;
    explicit LayerNorm(std::size_t dim);

    Var forward(const Var& x) const;
    ParameterList parameters() const;

private:
    Var gamma_;
    Var beta_;
};

class Embedding {
public:
    Embedding() = default;
    Embedding(std::size_t count, std::size_t dim, Rng& rng);

    Var forward(const std::vector<std::size_t>& ids) const;
    ParameterList parameters() const;
    std::size_t count() const { return table_.value().dim(0); }

private:
    Var table_;
};

} // namespace keepfit::nn
