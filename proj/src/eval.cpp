#include "keepfit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "keepfit/optim.hpp"

namespace keepfit::eval {

using ag::Var;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::vector<std::size_t> argmax_rows(const Tensor& t) {
    std::vector<std::size_t> out(t.rows());
    for (std::size_t r = 0; r < t.rows(); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < t.cols(); ++c) {
            if (t.at(r, c) > t.at(r, best)) best = c;
        }
        out[r] = best;
    }
    return out;
}

// Rank-sum form of the pair count, in half units so it stays integral.
double binary_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    unsigned long long doubled_rank_sum = 0, pos = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        // Ranks i+1..j share the midrank (i+1+j)/2; doubled: i+1+j.
        for (std::size_t t = i; t < j; ++t) {
            if (positive[order[t]]) {
                doubled_rank_sum += i + 1 + j;
                ++pos;
            }
        }
        i = j;
    }
    const unsigned long long neg = n - pos;
    const unsigned long long doubled_u = doubled_rank_sum - pos * (pos + 1);
    return static_cast<double>(doubled_u) / static_cast<double>(2 * pos * neg);
}

// Positives are visited by descending score (ties by index); each adds the
// precision of the threshold at its own score.
double binary_ap(const std::vector<double>& scores, const std::vector<bool>& positive) {
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::size_t total_pos = 0;
    for (bool p : positive) total_pos += p ? 1 : 0;
    double sum = 0.0;
    std::size_t seen = 0, seen_pos = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        std::size_t group_pos = 0;
        while (j < n && scores[order[j]] == scores[order[i]]) {
            if (positive[order[j]]) ++group_pos;
            ++j;
        }
        seen += j - i;
        seen_pos += group_pos;
        const double precision = static_cast<double>(seen_pos) / static_cast<double>(seen);
        for (std::size_t t = 0; t < group_pos; ++t) sum += precision;
        i = j;
    }
    return sum / static_cast<double>(total_pos);
}

} // namespace

json Metrics::to_json() const {
    return {{"acc", number_or_null(acc)}, {"auc", number_or_null(auc)}, {"aupr", number_or_null(aupr)},
            {"warnings", warnings}};
}

Metrics compute_metrics(const Tensor& probabilities, const std::vector<int>& labels) {
    if (probabilities.rank() != 2) throw ShapeError("compute_metrics: probabilities must be [N, C]");
    const std::size_t n = probabilities.rows(), c = probabilities.cols();
    if (labels.size() != n) throw ShapeError("compute_metrics: " + std::to_string(labels.size()) + " labels for " +
                                             std::to_string(n) + " rows");
    if (n == 0 || c == 0) throw Error("compute_metrics: empty input");
    for (std::size_t r = 0; r < n; ++r) {
        double s = 0.0;
        for (std::size_t k = 0; k < c; ++k) s += probabilities.at(r, k);
        if (std::abs(s - 1.0) > 1e-6) throw Error("compute_metrics: row " + std::to_string(r) + " sums to " + std::to_string(s));
        if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c) {
            throw Error("compute_metrics: label " + std::to_string(labels[r]) + " outside [0, " + std::to_string(c) + ")");
        }
    }

    Metrics m;
    const auto pred = argmax_rows(probabilities);
    std::size_t correct = 0;
    for (std::size_t r = 0; r < n; ++r) correct += pred[r] == static_cast<std::size_t>(labels[r]) ? 1 : 0;
    m.acc = static_cast<double>(correct) / static_cast<double>(n);

    std::vector<std::size_t> classes;
    if (c == 2) {
        classes = {1};
    } else {
        for (std::size_t k = 0; k < c; ++k) classes.push_back(k);
    }
    double auc_sum = 0.0, ap_sum = 0.0;
    std::size_t auc_n = 0, ap_n = 0;
    for (auto k : classes) {
        std::vector<double> scores(n);
        std::vector<bool> positive(n);
        std::size_t pos = 0;
        for (std::size_t r = 0; r < n; ++r) {
            scores[r] = probabilities.at(r, k);
            positive[r] = static_cast<std::size_t>(labels[r]) == k;
            pos += positive[r] ? 1 : 0;
        }
        if (pos == 0) {
            m.warnings.push_back("class " + std::to_string(k) + " absent from labels; skipped in AUC/AUPR");
            continue;
        }
        ap_sum += binary_ap(scores, positive);
        ++ap_n;
        if (pos == n) {
            m.warnings.push_back("class " + std::to_string(k) + " has no negatives; skipped in AUC");
            continue;
        }
        auc_sum += binary_auc(scores, positive);
        ++auc_n;
    }
    m.auc = auc_n ? auc_sum / static_cast<double>(auc_n) : std::numeric_limits<double>::quiet_NaN();
    m.aupr = ap_n ? ap_sum / static_cast<double>(ap_n) : std::numeric_limits<double>::quiet_NaN();
    return m;
}

Tensor image_features(const trainer::KeepFitModel& model, const std::vector<const data::Image*>& images) {
    ag::NoGradGuard no_grad;
    const std::size_t size = model.config().image.input_size;
    const std::size_t d = model.config().shared_dim;
    Tensor out({images.size(), d});
    constexpr std::size_t kChunk = 64;
    for (std::size_t lo = 0; lo < images.size(); lo += kChunk) {
        const std::size_t hi = std::min(images.size(), lo + kChunk);
        std::vector<const data::Image*> chunk(images.begin() + static_cast<std::ptrdiff_t>(lo),
                                              images.begin() + static_cast<std::ptrdiff_t>(hi));
        Var f = ag::l2_normalize_rows(model.encode_images(data::images_to_tensor(chunk, size)).flat);
        std::copy(f.value().data(), f.value().data() + f.value().size(), out.data() + lo * d);
    }
    return out;
}

Tensor class_embeddings(const trainer::KeepFitModel& model, const Vocabulary& vocab,
                        const data::PromptTemplate& templates, std::size_t n_classes) {
    ag::NoGradGuard no_grad;
    const std::size_t d = model.config().shared_dim;
    const std::size_t max_tokens = model.config().text.max_tokens;
    Tensor out({n_classes, d});
    for (std::size_t k = 0; k < n_classes; ++k) {
        if (k >= templates.variants.size() || templates.variants[k].empty()) {
            throw Error("zero-shot: class " + std::to_string(k) + " has no prompt template");
        }
        std::vector<std::vector<std::size_t>> tokens;
        for (const auto& v : templates.variants[k]) tokens.push_back(truncate_tokens(vocab.tokenize(v), max_tokens));
        Var e = ag::l2_normalize_rows(model.encode_texts(tokens));
        std::vector<double> mean(d, 0.0);
        for (std::size_t r = 0; r < tokens.size(); ++r) {
            for (std::size_t j = 0; j < d; ++j) mean[j] += e.value().at(r, j);
        }
        double norm = 0.0;
        for (double x : mean) norm += x * x;
        norm = std::sqrt(norm);
        if (norm == 0.0) throw Error("zero-shot: class " + std::to_string(k) + " prompt embeddings cancel out");
        for (std::size_t j = 0; j < d; ++j) out.at(k, j) = mean[j] / norm;
    }
    return out;
}

Tensor zero_shot_logits(const Tensor& features, const Tensor& class_emb, double temperature) {
    if (features.cols() != class_emb.cols()) throw ShapeError("zero-shot: feature dim differs from class embeddings");
    Tensor f = features;
    for (std::size_t r = 0; r < f.rows(); ++r) {
        double norm = 0.0;
        for (std::size_t j = 0; j < f.cols(); ++j) norm += f.at(r, j) * f.at(r, j);
        norm = std::sqrt(norm);
        if (norm == 0.0) throw Error("zero-shot: zero image feature at row " + std::to_string(r));
        for (std::size_t j = 0; j < f.cols(); ++j) f.at(r, j) /= norm;
    }
    Tensor logits = matmul(f, class_emb, false, true);
    for (auto& v : logits.storage()) v /= temperature;
    return logits;
}

Tensor softmax(const Tensor& logits) {
    Tensor out = logits;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < out.cols(); ++c) mx = std::max(mx, out.at(r, c));
        double s = 0.0;
        for (std::size_t c = 0; c < out.cols(); ++c) {
            out.at(r, c) = std::exp(out.at(r, c) - mx);
            s += out.at(r, c);
        }
        for (std::size_t c = 0; c < out.cols(); ++c) out.at(r, c) /= s;
    }
    return out;
}

Tensor zero_shot_classify(const Tensor& features, const Tensor& class_emb, double temperature) {
    return softmax(zero_shot_logits(features, class_emb, temperature));
}

Tensor zero_shot_classify(const trainer::LoadedModel& model, const std::vector<const data::Image*>& images,
                          const data::PromptTemplate& templates, std::size_t n_classes) {
    Tensor cls = class_embeddings(*model.model, model.vocabulary, templates, n_classes);
    return zero_shot_classify(image_features(*model.model, images), cls, model.model->temperature_value());
}

std::string to_string(Setting s) {
    switch (s) {
    case Setting::zero_shot: return "zero-shot";
    case Setting::few_shot: return "few-shot";
    case Setting::linear_probe: return "linear-probe";
    }
    return "?";
}

std::string to_string(Adapter a) {
    switch (a) {
    case Adapter::clip_adapter: return "clip-adapter";
    case Adapter::tip_adapter: return "tip-adapter";
    case Adapter::tip_adapter_f: return "tip-adapter-f";
    }
    return "?";
}

Setting parse_setting(const std::string& s) {
    if (s == "zero-shot") return Setting::zero_shot;
    if (s == "few-shot") return Setting::few_shot;
    if (s == "linear-probe") return Setting::linear_probe;
    throw UsageError("unknown eval setting '" + s + "' (expected zero-shot, few-shot or linear-probe)");
}

Adapter parse_adapter(const std::string& s) {
    if (s == "clip-adapter") return Adapter::clip_adapter;
    if (s == "tip-adapter") return Adapter::tip_adapter;
    if (s == "tip-adapter-f") return Adapter::tip_adapter_f;
    throw UsageError("unknown adapter '" + s + "' (expected clip-adapter, tip-adapter or tip-adapter-f)");
}

namespace {

Tensor one_hot(const std::vector<int>& labels, std::size_t n_classes) {
    Tensor out({labels.size(), n_classes});
    for (std::size_t i = 0; i < labels.size(); ++i) out.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
    return out;
}

double accuracy(const Tensor& scores, const std::vector<int>& labels) {
    const auto pred = argmax_rows(scores);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) ok += pred[i] == static_cast<std::size_t>(labels[i]) ? 1 : 0;
    return labels.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(labels.size());
}

std::vector<std::size_t> to_indices(const std::vector<int>& labels) {
    return {labels.begin(), labels.end()};
}

// Differentiable Tip-Adapter logits with trainable keys.
Var tip_logits(const Var& query, const Var& keys, const Tensor& labels_onehot, const Tensor& zs_logits, double alpha,
               double beta) {
    Var affinity = ag::scale(ag::exp(ag::scale(ag::matmul(query, keys, false, true), beta)), std::exp(-beta));
    Var cache = ag::matmul(affinity, Var::constant(labels_onehot));
    return ag::add(Var::constant(zs_logits), ag::scale(cache, alpha));
}

void check_support(const FewShotInputs& in, std::size_t shots) {
    if (shots == 0) throw UsageError("few-shot: shots must be positive");
    const std::size_t c = in.class_emb.rows();
    std::vector<std::size_t> counts(c, 0);
    for (int l : in.support_labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= c) throw Error("few-shot: support label " + std::to_string(l) + " out of range");
        ++counts[static_cast<std::size_t>(l)];
    }
    for (std::size_t k = 0; k < c; ++k) {
        if (counts[k] == 0) throw Error("few-shot: class " + std::to_string(k) + " absent from the support set");
        if (counts[k] != shots) {
            throw Error("few-shot: class " + std::to_string(k) + " has " + std::to_string(counts[k]) +
                        " support items, expected " + std::to_string(shots));
        }
    }
    if (in.support.rows() != in.support_labels.size()) throw ShapeError("few-shot: support labels do not match features");
}

} // namespace

Tensor tip_adapter_logits(const Tensor& query, const Tensor& keys, const std::vector<int>& key_labels,
                          const Tensor& class_emb, double temperature, double alpha, double beta) {
    Tensor logits = zero_shot_logits(query, class_emb, temperature);
    if (alpha == 0.0 || keys.rows() == 0) return logits;
    Tensor affinity = matmul(query, keys, false, true);
    for (auto& v : affinity.storage()) v = std::exp(-beta * (1.0 - v));
    Tensor cache = matmul(affinity, one_hot(key_labels, class_emb.rows()));
    logits.add_(cache, alpha);
    return logits;
}

TipParams tune_tip_adapter(const FewShotInputs& in, const FewShotConfig& config) {
    if (config.tip_alphas.empty() || config.tip_betas.empty()) throw UsageError("tip-adapter: empty search grid");
    const std::size_t s = in.support.rows();
    const std::size_t c = in.class_emb.rows();
    const Tensor zs = zero_shot_logits(in.support, in.class_emb, in.temperature);
    const Tensor sim = matmul(in.support, in.support, false, true);
    TipParams best{config.tip_alphas.front(), config.tip_betas.front(), -1.0};
    for (double beta : config.tip_betas) {
        for (double alpha : config.tip_alphas) {
            std::size_t ok = 0;
            for (std::size_t i = 0; i < s; ++i) {
                std::vector<double> row(c);
                for (std::size_t k = 0; k < c; ++k) row[k] = zs.at(i, k);
                for (std::size_t j = 0; j < s; ++j) {
                    if (j == i) continue;
                    row[static_cast<std::size_t>(in.support_labels[j])] += alpha * std::exp(-beta * (1.0 - sim.at(i, j)));
                }
                const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
                ok += pred == static_cast<std::size_t>(in.support_labels[i]) ? 1 : 0;
            }
            const double acc = static_cast<double>(ok) / static_cast<double>(s);
            if (acc > best.support_accuracy) best = {alpha, beta, acc};
        }
    }
    return best;
}

FewShotResult few_shot_adapt(const FewShotInputs& in, const FewShotConfig& config) {
    check_support(in, config.shots);
    const std::size_t c = in.class_emb.rows();
    const std::size_t d = in.class_emb.cols();
    FewShotResult out;
    out.details["adapter"] = to_string(config.adapter);
    out.details["shots"] = config.shots;

    if (config.adapter == Adapter::clip_adapter) {
        if (config.clip_reduction == 0 || d / config.clip_reduction == 0) throw UsageError("clip-adapter: bad reduction");
        Rng rng(config.seed);
        nn::Linear down(d, d / config.clip_reduction, false, rng);
        nn::Linear up(d / config.clip_reduction, d, false, rng);
        nn::ParameterList params;
        nn::append(params, down.parameters(), "down");
        nn::append(params, up.parameters(), "up");
        optim::AdamW opt(params, {.weight_decay = 0.0});
        const Var cls = Var::constant(in.class_emb);
        auto forward = [&](const Tensor& feats) {
            Var f = Var::constant(feats);
            Var a = ag::relu(up.forward(ag::relu(down.forward(f))));
            Var mixed = ag::add(ag::scale(a, config.clip_ratio), ag::scale(f, 1.0 - config.clip_ratio));
            return ag::scale(ag::matmul(ag::l2_normalize_rows(mixed), cls, false, true), 1.0 / in.temperature);
        };
        const auto targets = to_indices(in.support_labels);
        double last = 0.0;
        for (std::size_t e = 0; e < config.clip_epochs; ++e) {
            opt.zero_grad();
            Var loss = ag::cross_entropy_rows(forward(in.support), targets);
            last = loss.item();
            ag::backward(loss);
            opt.step(config.clip_lr);
        }
        ag::NoGradGuard no_grad;
        out.probabilities = softmax(forward(in.query).value());
        out.details["final_support_loss"] = last;
        out.details["residual_ratio"] = config.clip_ratio;
        return out;
    }

    const TipParams tip = tune_tip_adapter(in, config);
    out.details["alpha"] = tip.alpha;
    out.details["beta"] = tip.beta;
    out.details["loo_support_accuracy"] = tip.support_accuracy;
    if (config.adapter == Adapter::tip_adapter) {
        out.probabilities = softmax(tip_adapter_logits(in.query, in.support, in.support_labels, in.class_emb,
                                                       in.temperature, tip.alpha, tip.beta));
        return out;
    }

    // Tip-Adapter-F: fine-tune the cache keys on the support set, keeping the
    // keys with the best support accuracy (the untuned keys included).
    const Tensor labels = one_hot(in.support_labels, c);
    const Tensor zs_support = zero_shot_logits(in.support, in.class_emb, in.temperature);
    // With alpha = 0 the keys carry no gradient; use the smallest positive alpha instead.
    double alpha = tip.alpha;
    if (alpha == 0.0) {
        for (double a : config.tip_alphas) {
            if (a > 0.0) {
                alpha = a;
                break;
            }
        }
    }
    Var keys = Var::parameter(in.support);
    nn::ParameterList params{{"keys", keys, false}};
    optim::AdamW opt(params, {.weight_decay = 0.0});
    const Var support = Var::constant(in.support);
    const auto targets = to_indices(in.support_labels);
    auto support_acc = [&](const Tensor& k, double a) {
        return accuracy(tip_adapter_logits(in.support, k, in.support_labels, in.class_emb, in.temperature, a, tip.beta),
                        in.support_labels);
    };
    Tensor best_keys = in.support;
    double best_alpha = tip.alpha;
    double best_acc = support_acc(in.support, tip.alpha);
    const double initial_acc = best_acc;
    std::size_t best_epoch = 0;
    for (std::size_t e = 1; e <= config.tip_f_epochs; ++e) {
        opt.zero_grad();
        Var loss = ag::cross_entropy_rows(tip_logits(support, keys, labels, zs_support, alpha, tip.beta), targets);
        ag::backward(loss);
        opt.step(config.tip_f_lr);
        const double acc = support_acc(keys.value(), alpha);
        if (acc > best_acc) {
            best_acc = acc;
            best_keys = keys.value();
            best_alpha = alpha;
            best_epoch = e;
        }
    }
    out.probabilities = softmax(tip_adapter_logits(in.query, best_keys, in.support_labels, in.class_emb, in.temperature,
                                                   best_alpha, tip.beta));
    out.details["tip_support_accuracy"] = initial_acc;
    out.details["support_accuracy"] = best_acc;
    out.details["best_epoch"] = best_epoch;
    return out;
}

Tensor linear_probe(const Tensor& train_features, const std::vector<int>& train_labels, const Tensor& test_features,
                    std::size_t n_classes, const LinearProbeConfig& config) {
    if (train_features.rows() != train_labels.size()) throw ShapeError("linear probe: labels do not match features");
    if (train_features.cols() != test_features.cols()) throw ShapeError("linear probe: train/test feature dims differ");
    if (n_classes < 2) throw Error("linear probe: need at least two classes");
    std::vector<bool> present(n_classes, false);
    for (int l : train_labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= n_classes) throw Error("linear probe: label out of range");
        present[static_cast<std::size_t>(l)] = true;
    }
    if (std::count(present.begin(), present.end(), true) < 2) {
        throw Error("linear probe: training set contains a single class");
    }
    const std::size_t d = train_features.cols();
    Var w = Var::parameter(Tensor({d, n_classes}));
    Var b = Var::parameter(Tensor({n_classes}));
    optim::AdamW opt({{"weight", w, true}, {"bias", b, false}}, {.weight_decay = config.weight_decay});
    const Var x = Var::constant(train_features);
    const auto targets = to_indices(train_labels);
    double previous = std::numeric_limits<double>::infinity();
    for (std::size_t e = 0; e < config.max_epochs; ++e) {
        opt.zero_grad();
        Var loss = ag::cross_entropy_rows(ag::add_row(ag::matmul(x, w), b), targets);
        const double value = loss.item();
        if (!std::isfinite(value)) throw Error("linear probe: non-finite loss at epoch " + std::to_string(e));
        if (std::abs(previous - value) < config.tolerance) break;
        previous = value;
        ag::backward(loss);
        opt.step(config.lr);
    }
    ag::NoGradGuard no_grad;
    return softmax(ag::add_row(ag::matmul(Var::constant(test_features), w), b).value());
}

std::size_t fold_of(const std::string& record_id, std::uint64_t seed, std::size_t folds) {
    if (folds == 0) throw UsageError("folds must be positive");
    return static_cast<std::size_t>(fnv1a(record_id.data(), record_id.size(), fnv1a(&seed, sizeof seed)) % folds);
}

json EvalReport::to_json() const {
    json j;
    j["setting"] = setting;
    j["task"] = task;
    j["folds"] = json::array();
    for (const auto& f : folds) {
        j["folds"].push_back({{"fold", f.fold}, {"n_train", f.n_train}, {"n_test", f.n_test},
                              {"metrics", f.metrics.to_json()}, {"details", f.details}});
    }
    j["mean"] = mean.to_json();
    j["encoder_checksum"] = encoder_checksum_after;
    return j;
}

std::string EvalReport::table() const {
    auto cell = [](double v) {
        std::ostringstream s;
        if (std::isfinite(v)) {
            s << std::fixed << std::setprecision(4) << v;
        } else {
            s << "n/a";
        }
        return s.str();
    };
    std::ostringstream out;
    out << "setting: " << setting << "\n";
    out << std::left << std::setw(8) << "fold" << std::setw(8) << "n_test" << std::setw(10) << "ACC" << std::setw(10)
        << "AUC" << std::setw(10) << "AUPR" << "\n";
    for (const auto& f : folds) {
        out << std::setw(8) << f.fold << std::setw(8) << f.n_test << std::setw(10) << cell(f.metrics.acc)
            << std::setw(10) << cell(f.metrics.auc) << std::setw(10) << cell(f.metrics.aupr) << "\n";
    }
    out << std::setw(8) << "mean" << std::setw(8) << "" << std::setw(10) << cell(mean.acc) << std::setw(10)
        << cell(mean.auc) << std::setw(10) << cell(mean.aupr) << "\n";
    return out.str();
}

namespace {

Tensor select_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
    Tensor out({rows.size(), t.cols()});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy(t.data() + rows[i] * t.cols(), t.data() + (rows[i] + 1) * t.cols(), out.data() + i * t.cols());
    }
    return out;
}

std::vector<int> select(const std::vector<int>& v, const std::vector<std::size_t>& idx) {
    std::vector<int> out;
    for (auto i : idx) out.push_back(v[i]);
    return out;
}

double mean_of(const std::vector<FoldResult>& folds, double Metrics::*field) {
    double s = 0.0;
    for (const auto& f : folds) s += f.metrics.*field;
    return s / static_cast<double>(folds.size());
}

json task_json(const EvalTask& task) {
    json j = {{"setting", to_string(task.setting)}, {"folds", task.folds}, {"seed", task.seed}};
    if (task.setting == Setting::few_shot) {
        j["adapter"] = to_string(task.few_shot.adapter);
        j["shots"] = task.few_shot.shots;
    }
    if (task.setting == Setting::linear_probe) {
        j["max_epochs"] = task.linear_probe.max_epochs;
        j["lr"] = task.linear_probe.lr;
        j["tolerance"] = task.linear_probe.tolerance;
    }
    return j;
}

} // namespace

EvalReport run_eval(const EvalTask& task, const data::Corpus& corpus, const fs::path& corpus_root,
                    const trainer::LoadedModel& model) {
    if (task.folds == 0) throw UsageError("eval: folds must be positive");
    const std::size_t n_classes = corpus.classes.classes.size();
    if (n_classes == 0) throw Error("eval: class table is empty");

    std::vector<data::Image> images;
    std::vector<int> labels;
    std::vector<std::size_t> fold_ids;
    std::vector<std::string> ids;
    std::size_t skipped = 0;
    for (const auto& r : corpus.records) {
        if (!r.category_id && task.labeled_only) {
            ++skipped;
            continue;
        }
        if (!r.category_id) {
            throw Error("eval: record " + data::record_id(r) +
                        " has no ground-truth category (set eval.labeled_only to skip such records)");
        }
        images.push_back(data::load_image(r, corpus_root));
        labels.push_back(*r.category_id);
        ids.push_back(data::record_id(r));
        fold_ids.push_back(fold_of(ids.back(), task.seed, task.folds));
    }
    if (images.empty()) throw Error("eval: corpus has no records");

    EvalReport report;
    report.setting = to_string(task.setting);
    report.task = task_json(task);
    if (task.labeled_only) report.task["skipped_unlabeled"] = skipped;
    report.encoder_checksum_before = hex64(nn::checksum(model.model->encoder_parameters()));

    std::vector<const data::Image*> ptrs;
    for (const auto& im : images) ptrs.push_back(&im);
    const Tensor features = image_features(*model.model, ptrs);
    const Tensor cls = class_embeddings(*model.model, model.vocabulary, corpus.classes.prompts, n_classes);
    const double tau = model.model->temperature_value();

    for (std::size_t fold = 0; fold < task.folds; ++fold) {
        std::vector<std::size_t> test, pool;
        for (std::size_t i = 0; i < images.size(); ++i) {
            if (fold_ids[i] == fold) test.push_back(i);
            if (task.folds == 1 || fold_ids[i] != fold) pool.push_back(i);
        }
        if (test.empty()) throw Error("eval: fold " + std::to_string(fold) + " has no test records");
        FoldResult fr;
        fr.fold = fold;
        Tensor probs;
        switch (task.setting) {
        case Setting::zero_shot:
            probs = zero_shot_classify(select_rows(features, test), cls, tau);
            break;
        case Setting::few_shot: {
            if (task.few_shot.shots == 0) throw UsageError("few-shot: shots must be positive");
            std::vector<std::vector<std::size_t>> per_class(n_classes);
            for (auto i : pool) per_class[static_cast<std::size_t>(labels[i])].push_back(i);
            std::vector<std::size_t> support;
            for (std::size_t k = 0; k < n_classes; ++k) {
                auto& members = per_class[k];
                if (members.size() < task.few_shot.shots) {
                    throw Error("eval: fold " + std::to_string(fold) + " has " + std::to_string(members.size()) +
                                " support candidates for class " + std::to_string(k) + " (" +
                                corpus.classes.classes[k].name + "), need " + std::to_string(task.few_shot.shots));
                }
                const std::uint64_t salt = task.seed ^ (0x9e3779b97f4a7c15ULL * (fold + 1));
                std::stable_sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
                    return fnv1a(ids[a].data(), ids[a].size(), salt) < fnv1a(ids[b].data(), ids[b].size(), salt);
                });
                support.insert(support.end(), members.begin(),
                               members.begin() + static_cast<std::ptrdiff_t>(task.few_shot.shots));
            }
            if (task.folds == 1) {
                std::vector<bool> in_support(images.size(), false);
                for (auto i : support) in_support[i] = true;
                std::vector<std::size_t> query;
                for (auto i : test) {
                    if (!in_support[i]) query.push_back(i);
                }
                test = std::move(query);
                if (test.empty()) throw Error("eval: no query records left after drawing the support set");
            }
            FewShotInputs in{select_rows(features, support), select(labels, support), select_rows(features, test), cls,
                             tau};
            FewShotConfig config = task.few_shot;
            config.seed = task.seed + fold;
            auto result = few_shot_adapt(in, config);
            probs = std::move(result.probabilities);
            fr.details = std::move(result.details);
            fr.n_train = support.size();
            break;
        }
        case Setting::linear_probe:
            probs = linear_probe(select_rows(features, pool), select(labels, pool), select_rows(features, test),
                                 n_classes, task.linear_probe);
            fr.n_train = pool.size();
            break;
        }
        fr.n_test = test.size();
        fr.metrics = compute_metrics(probs, select(labels, test));
        report.folds.push_back(std::move(fr));
    }
    report.mean.acc = mean_of(report.folds, &Metrics::acc);
    report.mean.auc = mean_of(report.folds, &Metrics::auc);
    report.mean.aupr = mean_of(report.folds, &Metrics::aupr);
    for (const auto& f : report.folds) {
        for (const auto& w : f.metrics.warnings) report.mean.warnings.push_back("fold " + std::to_string(f.fold) + ": " + w);
    }
    report.encoder_checksum_after = hex64(nn::checksum(model.model->encoder_parameters()));
    if (report.encoder_checksum_after != report.encoder_checksum_before) {
        throw Error("eval: encoder parameters changed during evaluation");
    }
    return report;
}

} // namespace keepfit::eval
