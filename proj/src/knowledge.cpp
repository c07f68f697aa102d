#include "keepfit/knowledge.hpp"

#include <cmath>

namespace keepfit::knowledge {

CrossAttention::CrossAttention(Flavor flavor, std::size_t key_dim, std::size_t value_dim, std::size_t heads, Rng& rng)
    : flavor_(flavor),
      heads_(heads),
      key_dim_(key_dim),
      value_dim_(value_dim),
      wq_(key_dim, key_dim, false, rng),
      wk_(key_dim, key_dim, false, rng),
      wv_(value_dim, value_dim, false, rng),
      wo_(value_dim, value_dim, false, rng) {
    if (heads == 0 || key_dim % heads != 0 || value_dim % heads != 0) {
        throw UsageError("cross attention: head count " + std::to_string(heads) + " must divide " +
                         std::to_string(key_dim) + " and " + std::to_string(value_dim));
    }
}

double CrossAttention::scale() const {
    return 1.0 / std::sqrt(static_cast<double>(key_dim_) / static_cast<double>(heads_));
}

CrossAttention::Output CrossAttention::forward(const Var& query, const Var& key, const Var& value) const {
    if (key.value().rows() == 0) throw Error("cross attention: empty elite batch");
    if (query.value().cols() != key_dim_ || key.value().cols() != key_dim_) {
        throw ShapeError("cross attention: query/key dim must be " + std::to_string(key_dim_) + ", got " +
                         shape_str(query.shape()) + " / " + shape_str(key.shape()));
    }
    if (value.value().cols() != value_dim_ || value.value().rows() != key.value().rows()) {
        throw ShapeError("cross attention: value " + shape_str(value.shape()) + " does not match key " +
                         shape_str(key.shape()));
    }
    const std::size_t kd = key_dim_ / heads_;
    const std::size_t vd = value_dim_ / heads_;
    Var q = wq_.forward(query), k = wk_.forward(key), v = wv_.forward(value);
    Output out;
    std::vector<Var> heads;
    for (std::size_t h = 0; h < heads_; ++h) {
        Var scores = ag::scale(ag::matmul(ag::slice_cols(q, h * kd, kd), ag::slice_cols(k, h * kd, kd), false, true), scale());
        Var psi = ag::softmax_rows(scores);
        out.attention.push_back(psi.value());
        heads.push_back(ag::matmul(psi, ag::slice_cols(v, h * vd, vd)));
    }
    out.knowledge = wo_.forward(heads.size() == 1 ? heads[0] : ag::concat_cols(heads));
    return out;
}

nn::ParameterList CrossAttention::parameters() const {
    nn::ParameterList p;
    nn::append(p, wq_.parameters(), "w_q");
    nn::append(p, wk_.parameters(), "w_k");
    nn::append(p, wv_.parameters(), "w_v");
    nn::append(p, wo_.parameters(), "w_o");
    return p;
}

namespace {

KnowledgeVector extract(const Var& queries, const Var& keys, const Var& elite_texts, const CrossAttention& attention,
                        Flavor expected) {
    if (attention.flavor() != expected) throw Error("knowledge extraction: attention module has the wrong flavor");
    auto out = attention.forward(queries, keys, elite_texts);
    return {out.knowledge, expected, std::move(out.attention)};
}

} // namespace

KnowledgeVector semantic_extract(const Var& categorical_images, const Var& elite_images, const Var& elite_texts,
                                 const CrossAttention& attention) {
    return extract(categorical_images, elite_images, elite_texts, attention, Flavor::semantic);
}

KnowledgeVector appearance_extract(const Var& categorical_codes, const Var& elite_codes, const Var& elite_texts,
                                   const CrossAttention& attention) {
    return extract(categorical_codes, elite_codes, elite_texts, attention, Flavor::appearance);
}

Var ek_refinement_loss(const Var& knowledge, const Var& categorical_texts) {
    if (knowledge.shape() != categorical_texts.shape()) {
        throw ShapeError("ek_refinement_loss: " + shape_str(knowledge.shape()) + " vs " +
                         shape_str(categorical_texts.shape()));
    }
    const double batch = static_cast<double>(knowledge.value().rows());
    return ag::scale(ag::sum(ag::square(ag::sub(knowledge, categorical_texts))), 1.0 / batch);
}

Var ek_refinement_loss(const KnowledgeVector& knowledge, const Var& categorical_texts) {
    return ek_refinement_loss(knowledge.values, categorical_texts);
}

} // namespace keepfit::knowledge
