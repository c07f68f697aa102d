#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "keepfit/checkpoint.hpp"
#include "keepfit/contrastive.hpp"
#include "keepfit/data.hpp"
#include "keepfit/encoders.hpp"
#include "keepfit/ibq.hpp"
#include "keepfit/knowledge.hpp"
#include "keepfit/optim.hpp"

namespace keepfit::trainer {

using ag::Var;

struct ModelConfig {
    encoders::ImageEncoderConfig image;
    encoders::TextEncoderConfig text;
    std::size_t shared_dim = 64;
    std::size_t attention_heads = 8;
    /// Code dimension of the appearance branch; must match the codebook.
    std::size_t code_dim = 64;
    double temperature_init = 0.07;

    void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

inline constexpr double kMinTemperature = 1e-3;
inline constexpr double kMaxTemperature = 1.0;

/// Every trainable piece of the pretraining model.
class KeepFitModel {
public:
    KeepFitModel(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    /// Groups: vision.*, text.*, spatial.*, semantic.*, appearance.*, temperature.
    nn::ParameterList parameters() const;
    /// Image and text towers only.
    nn::ParameterList encoder_parameters() const;

    encoders::EncodedBatch encode_images(const Tensor& images, data::Source source = data::Source::categorical) const {
        return vision.encode(images, source);
    }
    Var encode_texts(const std::vector<std::vector<std::size_t>>& tokens) const { return text.encode(tokens); }
    double temperature_value() const { return temperature.value()[0]; }
    void clamp_temperature();

    /// Weights only; the caller adds metadata.
    Checkpoint to_checkpoint() const;
    void load(const Checkpoint& ckpt);

    encoders::VisionTower vision;
    encoders::TextTower text;
    ibq::SpatialProjection spatial;
    knowledge::CrossAttention semantic;
    knowledge::CrossAttention appearance;
    Var temperature;

private:
    ModelConfig config_;
};

struct TrainConfig {
    double lambda1 = 100.0;
    double lambda2 = 1e4;
    double lr = 1e-4;
    double weight_decay = 1e-5;
    std::size_t warmup_epochs = 1;
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    /// Let the refinement losses backpropagate into the elite-side features
    /// (keys and values of the knowledge extraction).
    bool ek_elite_gradient = true;

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);

/// One source's mini-batch. Categorical batches carry category ids.
struct Batch {
    Tensor images;
    std::vector<std::vector<std::size_t>> tokens;
    std::optional<std::vector<int>> category_ids;
    data::Source source = data::Source::categorical;

    std::size_t size() const { return tokens.size(); }
};

struct LossBreakdown {
    double itc_categorical = 0.0;
    double itc_elite = 0.0;
    double ek_semantic = 0.0;
    double ek_appearance = 0.0;
    double total = 0.0;

    nlohmann::json to_json() const;
};

using Quantizer = std::function<ibq::QuantizedBatch(const Var& projected, const Var& codebook)>;

struct Objective {
    Var total;
    LossBreakdown breakdown;
    std::optional<knowledge::KnowledgeVector> semantic;
    std::optional<knowledge::KnowledgeVector> appearance;
};

/// L = L_itc^p + L_itc^m + lambda1 L_EK^s + lambda2 L_EK^a. The appearance
/// terms are skipped (reported as 0) when no codebook is given; the knowledge
/// terms need a non-empty elite batch.
Objective compute_objective(const KeepFitModel& model, const Batch& elite, const Batch& categorical,
                            const TrainConfig& config, const ibq::Codebook* codebook,
                            const Quantizer& quantizer = ibq::quantize);

/// Model, optimizer and schedule of a run in progress.
class TrainState {
public:
    TrainState(KeepFitModel model, const TrainConfig& config, std::size_t steps_per_epoch,
               std::optional<ibq::Codebook> codebook);

    KeepFitModel& model() { return model_; }
    const KeepFitModel& model() const { return model_; }
    const ibq::Codebook* codebook() const { return codebook_ ? &*codebook_ : nullptr; }
    std::size_t step() const { return step_; }
    double lr_at(std::size_t step) const { return schedule_.lr(step); }
    const std::vector<LossBreakdown>& telemetry() const { return telemetry_; }

    /// One optimizer update. Throws keepfit::Error naming every component
    /// when the loss is not finite.
    LossBreakdown step(const Batch& elite, const Batch& categorical, const TrainConfig& config);

private:
    KeepFitModel model_;
    std::optional<ibq::Codebook> codebook_;
    optim::AdamW optimizer_;
    optim::WarmupCosine schedule_;
    std::size_t step_ = 0;
    std::vector<LossBreakdown> telemetry_;
};

LossBreakdown training_step(const Batch& elite, const Batch& categorical, TrainState& state, const TrainConfig& config);

struct TrainInputs {
    data::Corpus corpus;
    std::filesystem::path corpus_root;
    ModelConfig model;
    /// Optional text-encoder checkpoint from masked-language pretraining;
    /// supplies the vocabulary and initial text-encoder weights.
    std::optional<Checkpoint> text_init;
    std::optional<ibq::Codebook> codebook;
    /// Written verbatim to {run}/config.json when set.
    nlohmann::json config_snapshot;
    /// Called with each epoch's telemetry record.
    std::function<void(const nlohmann::json&)> on_epoch;
};

struct TrainResult {
    std::filesystem::path run_dir;
    std::filesystem::path last_checkpoint;
    std::filesystem::path best_checkpoint;
    std::size_t steps = 0;
    std::vector<LossBreakdown> telemetry;
    std::string codebook_checksum_before;
    std::string codebook_checksum_after;
};

/// Full pretraining run. Writes {run}/config.json, {run}/codebook.kfc,
/// {run}/weights-{step}.kfw, {run}/weights-best.kfw, {run}/telemetry.jsonl.
TrainResult train(const TrainInputs& inputs, const TrainConfig& config, const std::filesystem::path& run_dir);

/// A trained model with the vocabulary it was trained with.
struct LoadedModel {
    std::unique_ptr<KeepFitModel> model;
    Vocabulary vocabulary;
    nlohmann::json meta;
};

LoadedModel load_model(const std::filesystem::path& weights);
/// weights-best.kfw when present, else the highest-step weights file.
std::filesystem::path find_weights(const std::filesystem::path& run_dir);

/// Vocabulary covering elite captions and every prompt expansion.
Vocabulary corpus_vocabulary(const data::Corpus& corpus);

} // namespace keepfit::trainer
