#include "keepfit/nn.hpp"

#include <cmath>

namespace keepfit::nn {

std::uint64_t checksum(const ParameterList& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : params) {
        h = fnv1a(p.name.data(), p.name.size(), h);
        const auto& shape = p.var.value().shape();
        h = fnv1a(shape.data(), shape.size() * sizeof(std::size_t), h);
        h = fnv1a(p.var.value().data(), p.var.value().size() * sizeof(double), h);
    }
    return h;
}

void zero_grad(const ParameterList& params) {
    for (auto p : params) p.var.zero_grad();
}

void append(ParameterList& into, const ParameterList& from, const std::string& prefix) {
    for (const auto& p : from) into.push_back({prefix + "." + p.name, p.var, p.weight_decay});
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.storage()) v = rng.normal(0.0, stddev);
    return t;
}

Linear::Linear(std::size_t in, std::size_t out, bool bias, Rng& rng)
    : weight_(Var::parameter(normal_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng))) {
    if (bias) bias_ = Var::parameter(Tensor({out}));
}

Var Linear::forward(const Var& x) const {
    Var y = ag::matmul(x, weight_);
    return bias_ ? ag::add_row(y, bias_) : y;
}

ParameterList Linear::parameters() const {
    ParameterList out{{"weight", weight_}};
    if (bias_) out.push_back({"bias", bias_});
    return out;
}

Conv2d::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t pad, Rng& rng)
    : weight_(Var::parameter(normal_tensor({kernel, kernel, in, out},
                                           std::sqrt(2.0 / static_cast<double>(kernel * kernel * in)), rng))),
      bias_(Var::parameter(Tensor({out}))),
      stride_(stride),
      pad_(pad) {}

Var Conv2d::forward(const Var& x) const { return ag::conv2d(x, weight_, bias_, stride_, pad_); }

ParameterList Conv2d::parameters() const { return {{"weight", weight_}, {"bias", bias_}}; }

LayerNorm::LayerNorm(std::size_t dim)
    : gamma_(Var::parameter(Tensor({dim}, 1.0))), beta_(Var::parameter(Tensor({dim}))) {}

Var LayerNorm::forward(const Var& x) const { return ag::layer_norm_rows(x, gamma_, beta_); }

ParameterList LayerNorm::parameters() const { return {{"gamma", gamma_}, {"beta", beta_}}; }

Embedding::Embedding(std::size_t count, std::size_t dim, Rng& rng)
    : table_(Var::parameter(normal_tensor({count, dim}, 0.02, rng))) {}

Var Embedding::forward(const std::vector<std::size_t>& ids) const { return ag::gather_rows(table_, ids); }

ParameterList Embedding::parameters() const { return {{"table", table_}}; }

} // namespace keepfit::nn
