#include "keepfit/mlm.hpp"

#include <cmath>

#include "keepfit/optim.hpp"

namespace keepfit::mlm {

void MaskingPolicy::validate() const {
    if (!(mask_fraction > 0.0 && mask_fraction < 1.0)) throw UsageError("mask fraction must be in (0, 1)");
    if (mask_token < 0.0 || random_token < 0.0 || mask_token + random_token > 1.0) {
        throw UsageError("mask/random replacement probabilities must be non-negative and sum to at most 1");
    }
}

MaskedSequence apply_mask(const std::vector<std::size_t>& ids, std::size_t vocab_size, const MaskingPolicy& policy,
                          Rng& rng) {
    MaskedSequence out;
    out.input = ids;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] == Vocabulary::kCls || ids[i] == Vocabulary::kPad) continue;
        if (!rng.bernoulli(policy.mask_fraction)) continue;
        out.positions.push_back(i);
        out.targets.push_back(ids[i]);
        const double u = rng.uniform();
        if (u < policy.mask_token) {
            out.input[i] = Vocabulary::kMask;
        } else if (u < policy.mask_token + policy.random_token && vocab_size > Vocabulary::kNumSpecial) {
            out.input[i] = Vocabulary::kNumSpecial + rng.below(vocab_size - Vocabulary::kNumSpecial);
        }
    }
    return out;
}

MlmHead::MlmHead(std::size_t hidden, std::size_t vocab, Rng& rng) : linear_(hidden, vocab, true, rng) {}

std::optional<Var> masked_lm_loss(const encoders::TextEncoder& encoder, const MlmHead& head,
                                  const std::vector<MaskedSequence>& batch) {
    std::vector<Var> picked;
    std::vector<std::size_t> targets;
    for (const auto& seq : batch) {
        if (seq.positions.empty()) continue;
        Var h = encoder.hidden_states(seq.input);
        picked.push_back(ag::gather_rows(h, seq.positions));
        targets.insert(targets.end(), seq.targets.begin(), seq.targets.end());
    }
    if (picked.empty()) return std::nullopt;
    Var rows = picked.size() == 1 ? picked[0] : ag::concat_rows(picked);
    return ag::cross_entropy_rows(head.forward(rows), targets);
}

MlmResult mlm_pretrain(const std::vector<std::string>& corpus, const Vocabulary& vocab,
                       const encoders::TextEncoderConfig& config, const MlmConfig& mlm, const Checkpoint* resume) {
    if (corpus.empty()) throw Error("mlm_pretrain: empty corpus");
    mlm.policy.validate();
    if (mlm.batch_size == 0) throw UsageError("mlm_pretrain: batch_size must be positive");
    if (config.vocab_size != vocab.size()) throw UsageError("mlm_pretrain: config vocab_size differs from vocabulary");

    Rng init_rng(mlm.seed);
    encoders::TextEncoder encoder(config, init_rng);
    MlmHead head(config.hidden_dim, config.vocab_size, init_rng);
    nn::ParameterList params;
    nn::append(params, encoder.parameters(), "encoder");
    nn::append(params, head.parameters(), "mlm_head");
    optim::AdamW opt(params, {.weight_decay = mlm.weight_decay});

    MlmResult result;
    std::size_t start = 0;
    if (resume) {
        if (resume->kind != "text-encoder") throw Error("resume checkpoint is a '" + resume->kind + "', not a text encoder");
        resume->load_parameters(params, "");
        for (std::size_t i = 0; i < params.size(); ++i) {
            opt.first_moments()[i] = resume->tensor("adam_m." + params[i].name);
            opt.second_moments()[i] = resume->tensor("adam_v." + params[i].name);
        }
        start = resume->meta.at("step").get<std::size_t>();
        opt.set_steps(start);
        result.losses = resume->meta.value("losses", std::vector<double>{});
    }

    std::vector<std::vector<std::size_t>> tokenized;
    for (const auto& line : corpus) tokenized.push_back(truncate_tokens(vocab.tokenize(line), config.max_tokens));

    // Stream position depends only on (seed, step), so a resumed run draws the
    // same batches an uninterrupted run would.
    for (std::size_t step = start; step < start + mlm.steps; ++step) {
        Rng rng = Rng(mlm.seed ^ 0x6d6c6dULL).fork(step);
        std::vector<MaskedSequence> batch;
        for (std::size_t b = 0; b < mlm.batch_size; ++b) {
            const auto& ids = tokenized[rng.below(tokenized.size())];
            batch.push_back(apply_mask(ids, config.vocab_size, mlm.policy, rng));
        }
        opt.zero_grad();
        auto loss = masked_lm_loss(encoder, head, batch);
        if (!loss) continue;
        if (!std::isfinite(loss->item())) throw Error("mlm_pretrain: non-finite loss at step " + std::to_string(step));
        result.losses.push_back(loss->item());
        ag::backward(*loss);
        opt.step(mlm.lr);
    }

    result.step = start + mlm.steps;
    Checkpoint& ckpt = result.checkpoint;
    ckpt.kind = "text-encoder";
    ckpt.meta["config"] = encoders::to_json(config);
    ckpt.meta["vocabulary"] = vocab.tokens();
    ckpt.meta["step"] = result.step;
    ckpt.meta["losses"] = result.losses;
    ckpt.put_parameters(params, "");
    for (std::size_t i = 0; i < params.size(); ++i) {
        ckpt.put("adam_m." + params[i].name, opt.first_moments()[i]);
        ckpt.put("adam_v." + params[i].name, opt.second_moments()[i]);
    }
    return result;
}

Vocabulary vocabulary_from(const Checkpoint& ckpt) {
    return Vocabulary::from_tokens(ckpt.meta.at("vocabulary").get<std::vector<std::string>>());
}

encoders::TextEncoderConfig text_config_from(const Checkpoint& ckpt) {
    return encoders::text_config_from_json(ckpt.meta.at("config"));
}

} // namespace keepfit::mlm
