#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "keepfit/checkpoint.hpp"
#include "keepfit/data.hpp"
#include "keepfit/nn.hpp"

namespace keepfit::ibq {

using ag::Var;

/// K code embeddings of dimension D.
struct Codebook {
    Tensor embeddings; // [K, D]
    std::string fingerprint;

    std::size_t size() const { return embeddings.dim(0); }
    std::size_t dim() const { return embeddings.dim(1); }
    std::uint64_t checksum() const;
};

Checkpoint to_checkpoint(const Codebook& codebook, const nlohmann::json& report = {});
Codebook codebook_from(const Checkpoint& ckpt);
void save_codebook(const std::filesystem::path& path, const Codebook& codebook, const nlohmann::json& report = {});
Codebook load_codebook(const std::filesystem::path& path);

/// 1×1 convolution from encoder channels to the code dimension.
class SpatialProjection {
public:
    SpatialProjection() = default;
    SpatialProjection(std::size_t channels, std::size_t code_dim, Rng& rng);

    /// [B, h, w, c] -> [B, h*w, D]
    Var forward(const Var& spatial) const;
    nn::ParameterList parameters() const { return linear_.parameters(); }
    nn::Linear& linear() { return linear_; }

private:
    nn::Linear linear_;
};

struct QuantizedBatch {
    /// [B, P, D]; forward value is exactly C[hard_indices].
    Var codes;
    /// B*P indices in [0, K).
    std::vector<std::size_t> hard_indices;
    /// [B*P, K] softmax of the code logits.
    Tensor soft_distribution;
    /// [B*P, K] dot products against every code.
    Var logits;
    /// [B*P, K] index one-hot with straight-through soft gradients.
    Var index;
    std::size_t batch = 0;
    std::size_t positions = 0;
};

/// Dot-product tokenization of [B, P, D] features against `codebook` [K, D].
/// Pass Var::constant(...) for a frozen codebook.
QuantizedBatch quantize(const Var& projected, const Var& codebook);
/// Mean over positions: [B, P, D] -> [B, D].
Var pool_quantized(const QuantizedBatch& q);

struct AutoencoderConfig {
    std::size_t codebook_size = 256;
    std::size_t code_dim = 64;
    std::size_t input_size = 32;
    std::size_t hidden_channels = 32;
    std::size_t steps = 500;
    std::size_t batch_size = 16;
    double lr = 1e-3;
    double commitment_beta = 0.25;
    /// Weight of the code-usage entropy penalty that counters collapse.
    double entropy_weight = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
};

nlohmann::json to_json(const AutoencoderConfig& c);

struct CodebookReport {
    Codebook codebook;
    std::vector<double> reconstruction_losses;
    /// Fraction of codes selected at least once on the probe set.
    double utilization = 0.0;
    /// exp(entropy) of code usage on the probe set.
    double perplexity = 0.0;

    nlohmann::json summary() const;
};

struct CodeUsage {
    double utilization;
    double perplexity;
};
CodeUsage code_usage(const std::vector<std::size_t>& indices, std::size_t codebook_size);

/// Train encoder -> quantize -> decoder on `images`, minimising patch
/// reconstruction MSE + code pull + beta * commitment + a code-usage entropy
/// penalty, and return the codebook.
CodebookReport pretrain_codebook(const std::vector<data::Image>& images, const AutoencoderConfig& config);

/// [B, S, S, 3] -> [B * (S/f)^2, f*f*3], patches in raster order.
Tensor patchify(const Tensor& images, std::size_t factor);

} // namespace keepfit::ibq
