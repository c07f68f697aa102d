#include "keepfit/contrastive.hpp"

#include <map>

namespace keepfit::contrastive {

SimilarityMatrix similarity(const Var& image_feats, const Var& text_feats, const Var& temperature) {
    if (image_feats.value().rank() != 2 || text_feats.value().rank() != 2 ||
        image_feats.value().cols() != text_feats.value().cols()) {
        throw ShapeError("similarity: " + shape_str(image_feats.shape()) + " vs " + shape_str(text_feats.shape()));
    }
    if (temperature.value().size() != 1 || !(temperature.value()[0] > 0.0)) {
        throw Error("similarity: temperature must be a positive scalar");
    }
    Var v = ag::l2_normalize_rows(image_feats);
    Var t = ag::l2_normalize_rows(text_feats);
    return {ag::matmul(v, t, false, true), temperature};
}

Var softmax_rows(const SimilarityMatrix& sim, Direction direction) {
    Var logits = ag::div_scalar(sim.values, sim.temperature);
    if (direction == Direction::t2v) logits = ag::transpose(logits);
    return ag::softmax_rows(logits);
}

MatchingTargets build_targets(std::size_t batch, const std::optional<std::vector<int>>& category_ids) {
    return build_targets(batch, category_ids ? TargetKind::category_symmetric : TargetKind::identity, category_ids);
}

MatchingTargets build_targets(std::size_t batch, TargetKind kind, const std::optional<std::vector<int>>& category_ids) {
    MatchingTargets out;
    out.kind = kind;
    out.matrix = Tensor({batch, batch});
    if (kind == TargetKind::identity) {
        for (std::size_t i = 0; i < batch; ++i) out.matrix.at(i, i) = 1.0;
        return out;
    }
    if (!category_ids) throw Error("build_targets: categorical batch without category ids");
    const auto& ids = *category_ids;
    if (ids.size() != batch) throw ShapeError("build_targets: category id count differs from batch size");
    std::map<int, std::size_t> counts;
    for (int c : ids) ++counts[c];
    for (std::size_t i = 0; i < batch; ++i) {
        const double w = 1.0 / static_cast<double>(counts[ids[i]]);
        for (std::size_t j = 0; j < batch; ++j)
            if (ids[i] == ids[j]) out.matrix.at(i, j) = w;
    }
    return out;
}

Var itc_loss(const Var& u_v2t, const Var& u_t2v, const MatchingTargets& targets, double eps) {
    const auto& g = targets.matrix;
    if (u_v2t.shape() != g.shape() || u_t2v.shape() != g.shape()) {
        throw ShapeError("itc_loss: predictions " + shape_str(u_v2t.shape()) + "/" + shape_str(u_t2v.shape()) +
                         " vs targets " + shape_str(g.shape()));
    }
    const double batch = static_cast<double>(g.dim(0));
    Var gv = Var::constant(g);
    Var ce_v2t = ag::sum(ag::mul(gv, ag::log_floor(u_v2t, eps)));
    Var ce_t2v = ag::sum(ag::mul(gv, ag::log_floor(u_t2v, eps)));
    return ag::scale(ag::add(ce_v2t, ce_t2v), -0.5 / batch);
}

Var contrastive_loss(const Var& image_feats, const Var& text_feats, const Var& temperature,
                     const MatchingTargets& targets) {
    auto sim = similarity(image_feats, text_feats, temperature);
    return itc_loss(softmax_rows(sim, Direction::v2t), softmax_rows(sim, Direction::t2v), targets);
}

} // namespace keepfit::contrastive
