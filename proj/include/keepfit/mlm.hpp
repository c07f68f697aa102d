#pragma once

#include <optional>
#include <string>
#include <vector>

#include "keepfit/checkpoint.hpp"
#include "keepfit/encoders.hpp"

namespace keepfit::mlm {

using ag::Var;

/// Select each non-[CLS] position with probability `mask_fraction`; a
/// selected position becomes [MASK] with probability `mask_token`, a random
/// word with probability `random_token`, and is left unchanged otherwise.
struct MaskingPolicy {
    double mask_fraction = 0.15;
    double mask_token = 0.8;
    double random_token = 0.1;

    void validate() const;
};

struct MaskedSequence {
    std::vector<std::size_t> input;
    std::vector<std::size_t> positions;
    std::vector<std::size_t> targets;
};

MaskedSequence apply_mask(const std::vector<std::size_t>& ids, std::size_t vocab_size, const MaskingPolicy& policy,
                          Rng& rng);

/// Vocabulary prediction head on top of encoder hidden states.
class MlmHead {
public:
    MlmHead(std::size_t hidden, std::size_t vocab, Rng& rng);
    Var forward(const Var& hidden_states) const { return linear_.forward(hidden_states); }
    nn::ParameterList parameters() const { return linear_.parameters(); }

private:
    nn::Linear linear_;
};

/// Mean cross-entropy over all masked positions of the batch; nullopt when
/// no position is masked.
std::optional<Var> masked_lm_loss(const encoders::TextEncoder& encoder, const MlmHead& head,
                                  const std::vector<MaskedSequence>& batch);

struct MlmConfig {
    std::size_t steps = 200;
    std::size_t batch_size = 16;
    double lr = 1e-3;
    double weight_decay = 1e-5;
    MaskingPolicy policy;
    std::uint64_t seed = 0;
};

struct MlmResult {
    Checkpoint checkpoint;
    /// Loss per step that had at least one masked position.
    std::vector<double> losses;
    std::size_t step = 0;
};

/// Pretrain a text encoder with the masked-language objective. Passing a
/// previous checkpoint resumes it: weights, optimizer moments and the step
/// counter continue.
MlmResult mlm_pretrain(const std::vector<std::string>& corpus, const Vocabulary& vocab,
                       const encoders::TextEncoderConfig& config, const MlmConfig& mlm,
                       const Checkpoint* resume = nullptr);

/// Vocabulary and encoder config stored in a text-encoder checkpoint.
Vocabulary vocabulary_from(const Checkpoint& ckpt);
encoders::TextEncoderConfig text_config_from(const Checkpoint& ckpt);

} // namespace keepfit::mlm
