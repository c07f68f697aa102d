#pragma once

#include <vector>

#include "keepfit/nn.hpp"

namespace keepfit::knowledge {

using ag::Var;

enum class Flavor { semantic, appearance };

/// Multi-head cross attention: queries and keys live in a `key_dim` space,
/// values in the `value_dim` shared text space, output in `value_dim`.
/// Projections carry no bias.
class CrossAttention {
public:
    CrossAttention() = default;
    CrossAttention(Flavor flavor, std::size_t key_dim, std::size_t value_dim, std::size_t heads, Rng& rng);

    struct Output {
        /// [B_q, value_dim]
        Var knowledge;
        /// Per head, [B_q, B_kv] row-stochastic weights.
        std::vector<Tensor> attention;
    };

    /// query [B_q, key_dim], key [B_kv, key_dim], value [B_kv, value_dim].
    Output forward(const Var& query, const Var& key, const Var& value) const;

    Flavor flavor() const { return flavor_; }
    std::size_t heads() const { return heads_; }
    /// 1/sqrt(key_dim / heads)
    double scale() const;
    nn::ParameterList parameters() const;

    nn::Linear& w_q() { return wq_; }
    nn::Linear& w_k() { return wk_; }
    nn::Linear& w_v() { return wv_; }
    nn::Linear& w_o() { return wo_; }

private:
    Flavor flavor_ = Flavor::semantic;
    std::size_t heads_ = 1;
    std::size_t key_dim_ = 0;
    std::size_t value_dim_ = 0;
    nn::Linear wq_, wk_, wv_, wo_;
};

struct KnowledgeVector {
    Var values; // [B_p, d]
    Flavor flavor = Flavor::semantic;
    std::vector<Tensor> attention;
};

/// Categorical image features query elite image features; elite text
/// features are the values.
KnowledgeVector semantic_extract(const Var& categorical_images, const Var& elite_images, const Var& elite_texts,
                                 const CrossAttention& attention);

/// Same mechanics with pooled quantized codes as queries and keys.
KnowledgeVector appearance_extract(const Var& categorical_codes, const Var& elite_codes, const Var& elite_texts,
                                   const CrossAttention& attention);

/// (1/B) * sum_i ||EK_i - T_p,i||^2
Var ek_refinement_loss(const KnowledgeVector& knowledge, const Var& categorical_texts);
Var ek_refinement_loss(const Var& knowledge, const Var& categorical_texts);

} // namespace keepfit::knowledge
