#pragma once

#include <optional>
#include <vector>

#include "keepfit/autograd.hpp"

namespace keepfit::contrastive {

using ag::Var;

enum class Direction { v2t, t2v };
enum class TargetKind { identity, category_symmetric };

/// Cosine similarities of image rows against text rows, plus temperature.
struct SimilarityMatrix {
    Var values;      // [B, B], in [-1, 1]
    Var temperature; // one element, > 0
};

struct MatchingTargets {
    Tensor matrix; // [B, B], row-stochastic
    TargetKind kind = TargetKind::identity;
};

/// Default log floor for the cross-entropy.
inline constexpr double kLogEpsilon = 1e-12;

/// values[i][j] = cos(image_i, text_j). Throws on a zero-norm row.
SimilarityMatrix similarity(const Var& image_feats, const Var& text_feats, const Var& temperature);
/// Row-wise softmax of values / tau; t2v works on the transpose.
Var softmax_rows(const SimilarityMatrix& sim, Direction direction);

/// Identity when `category_ids` is absent, otherwise
/// G_ij = 1/|{k : c_k = c_i}| if c_i == c_j else 0.
MatchingTargets build_targets(std::size_t batch, const std::optional<std::vector<int>>& category_ids);
/// Throws when a categorical batch has no category ids.
MatchingTargets build_targets(std::size_t batch, TargetKind kind, const std::optional<std::vector<int>>& category_ids);

/// 1/2 * mean_i [CE(G_i, U_v2t,i) + CE(G_i, U_t2v,i)], CE(g,u) = -sum g log max(u, eps).
Var itc_loss(const Var& u_v2t, const Var& u_t2v, const MatchingTargets& targets, double eps = kLogEpsilon);

/// Convenience: similarity -> both softmaxes -> itc_loss.
Var contrastive_loss(const Var& image_feats, const Var& text_feats, const Var& temperature,
                     const MatchingTargets& targets);

} // namespace keepfit::contrastive
