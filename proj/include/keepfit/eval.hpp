#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "keepfit/data.hpp"
#include "keepfit/tensor.hpp"
#include "keepfit/trainer.hpp"

namespace keepfit::eval {

struct Metrics {
    double acc = 0.0;
    /// Macro one-vs-rest; NaN when no class has both positives and negatives.
    double auc = 0.0;
    /// Macro average precision; NaN when no class has a positive.
    double aupr = 0.0;
    std::vector<std::string> warnings;

    nlohmann::json to_json() const;
};

/// ACC is top-1 with ties going to the lowest class index. AUC counts every
/// (positive, negative) pair, ties as one half. AUPR is average precision:
/// mean over positives of the precision at that positive's score threshold.
/// With two classes only the class-1 curve is used; classes absent from
/// `labels` are skipped with a warning.
Metrics compute_metrics(const Tensor& probabilities, const std::vector<int>& labels);

/// Frozen image features, L2-normalised rows [N, d].
Tensor image_features(const trainer::KeepFitModel& model, const std::vector<const data::Image*>& images);
/// One row per class: mean of the L2-normalised variant embeddings,
/// re-normalised [C, d]. Throws when a class has no template variant.
Tensor class_embeddings(const trainer::KeepFitModel& model, const Vocabulary& vocab,
                        const data::PromptTemplate& templates, std::size_t n_classes);

/// cos(image, class) / tau, [N, C].
Tensor zero_shot_logits(const Tensor& features, const Tensor& class_emb, double temperature);
/// Row-wise softmax.
Tensor softmax(const Tensor& logits);
Tensor zero_shot_classify(const Tensor& features, const Tensor& class_emb, double temperature);
Tensor zero_shot_classify(const trainer::LoadedModel& model, const std::vector<const data::Image*>& images,
                          const data::PromptTemplate& templates, std::size_t n_classes);

enum class Setting { zero_shot, few_shot, linear_probe };
enum class Adapter { clip_adapter, tip_adapter, tip_adapter_f };

std::string to_string(Setting s);
std::string to_string(Adapter a);
/// Throw UsageError on unknown names.
Setting parse_setting(const std::string& s);
Adapter parse_adapter(const std::string& s);

struct FewShotConfig {
    Adapter adapter = Adapter::tip_adapter;
    std::size_t shots = 5;
    double clip_ratio = 0.2;
    std::size_t clip_reduction = 4;
    std::size_t clip_epochs = 200;
    double clip_lr = 1e-3;
    std::vector<double> tip_alphas{0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0};
    std::vector<double> tip_betas{1.0, 2.0, 3.0, 5.0, 7.0, 10.0};
    std::size_t tip_f_epochs = 100;
    double tip_f_lr = 1e-3;
    std::uint64_t seed = 0;
};

/// Support features [S, d] with labels; queries [Q, d]; all L2-normalised.
struct FewShotInputs {
    Tensor support;
    std::vector<int> support_labels;
    Tensor query;
    Tensor class_emb;
    double temperature = 0.07;
};

/// exp(-beta (1 - q . k)) affinities blended into the zero-shot logits.
Tensor tip_adapter_logits(const Tensor& query, const Tensor& keys, const std::vector<int>& key_labels,
                          const Tensor& class_emb, double temperature, double alpha, double beta);

struct TipParams {
    double alpha = 0.0;
    double beta = 1.0;
    double support_accuracy = 0.0;
};

/// Leave-one-out grid search over the support set only.
TipParams tune_tip_adapter(const FewShotInputs& in, const FewShotConfig& config);

struct FewShotResult {
    Tensor probabilities;
    nlohmann::json details;
};

/// Throws when shots is 0, a class is missing from the support set, or
/// some class does not have exactly `shots` support items.
FewShotResult few_shot_adapt(const FewShotInputs& in, const FewShotConfig& config);

struct LinearProbeConfig {
    std::size_t max_epochs = 2000;
    double lr = 1e-2;
    double tolerance = 1e-6;
    double weight_decay = 0.0;
};

/// Multinomial logistic regression on frozen features; full-batch Adam until
/// the loss changes by less than `tolerance` or `max_epochs` is reached.
Tensor linear_probe(const Tensor& train_features, const std::vector<int>& train_labels,
                    const Tensor& test_features, std::size_t n_classes, const LinearProbeConfig& config);

struct EvalTask {
    Setting setting = Setting::zero_shot;
    std::size_t folds = 5;
    std::uint64_t seed = 0;
    /// Skip records without a category id instead of rejecting the corpus.
    bool labeled_only = false;
    FewShotConfig few_shot;
    LinearProbeConfig linear_probe;
};

/// Pure function of (record id, seed, folds).
std::size_t fold_of(const std::string& record_id, std::uint64_t seed, std::size_t folds);

struct FoldResult {
    std::size_t fold = 0;
    std::size_t n_train = 0;
    std::size_t n_test = 0;
    Metrics metrics;
    nlohmann::json details;
};

struct EvalReport {
    std::string setting;
    nlohmann::json task;
    std::vector<FoldResult> folds;
    Metrics mean;
    std::string encoder_checksum_before;
    std::string encoder_checksum_after;

    nlohmann::json to_json() const;
    std::string table() const;
};

/// Evaluate every record of `corpus` (each must carry a category id).
/// Test items of fold f are the records hashed to f; the training pool is
/// the other folds, or every record when folds == 1 (few-shot queries then
/// exclude the support items).
EvalReport run_eval(const EvalTask& task, const data::Corpus& corpus, const std::filesystem::path& corpus_root,
                    const trainer::LoadedModel& model);

} // namespace keepfit::eval
