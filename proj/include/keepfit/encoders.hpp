#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "keepfit/data.hpp"
#include "keepfit/nn.hpp"
#include "keepfit/tokenizer.hpp"

namespace keepfit::encoders {

using ag::Var;

enum class Backbone { small_conv, resnet_like };

struct ImageEncoderConfig {
    Backbone backbone = Backbone::small_conv;
    std::size_t input_size = 32;
    /// One entry per block.
    std::vector<std::size_t> channels{16, 32, 32, 64};
    std::vector<std::size_t> strides{2, 2, 2, 1};

    void validate() const;
    std::size_t downsampling() const;
    std::size_t grid() const { return input_size / downsampling(); }
    std::size_t feature_channels() const { return channels.back(); }
};

struct TextEncoderConfig {
    std::size_t vocab_size = 0;
    std::size_t max_tokens = 256;
    std::size_t hidden_dim = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t ffn_dim = 128;

    void validate() const;
};

nlohmann::json to_json(const ImageEncoderConfig& c);
ImageEncoderConfig image_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TextEncoderConfig& c);
TextEncoderConfig text_config_from_json(const nlohmann::json& j);

/// Feature extractor producing a [B, h, w, c] map. Implementations are
/// interchangeable behind this interface.
class ImageBackbone {
public:
    virtual ~ImageBackbone() = default;
    virtual Var forward(const Var& images) const = 0;
    virtual nn::ParameterList parameters() const = 0;
};

std::unique_ptr<ImageBackbone> make_backbone(const ImageEncoderConfig& config, Rng& rng);

struct EncodedBatch {
    /// [B, d], after the vision projector, not normalised.
    Var flat;
    /// [B, h, w, c], bypassing the projector.
    Var spatial;
    data::Source source = data::Source::categorical;
};

/// Image encoder plus its linear projector into the shared space.
class VisionTower {
public:
    VisionTower(const ImageEncoderConfig& config, std::size_t shared_dim, Rng& rng);

    /// `images` is [B, input_size, input_size, 3].
    EncodedBatch encode(const Tensor& images, data::Source source = data::Source::categorical) const;
    const ImageEncoderConfig& config() const { return config_; }
    /// Names: backbone.*, projector.*
    nn::ParameterList parameters() const;
    nn::ParameterList backbone_parameters() const { return backbone_->parameters(); }

private:
    ImageEncoderConfig config_;
    std::unique_ptr<ImageBackbone> backbone_;
    nn::Linear projector_;
};

/// Pre-LN transformer block with multi-head self-attention.
class TransformerBlock {
public:
    TransformerBlock(std::size_t hidden, std::size_t heads, std::size_t ffn, Rng& rng);
    Var forward(const Var& x) const;
    nn::ParameterList parameters() const;

private:
    std::size_t heads_;
    nn::LayerNorm ln1_, ln2_;
    nn::Linear q_, k_, v_, o_;
    nn::Linear fc1_, fc2_;
};

/// Token + position embeddings, transformer blocks, final layer norm.
class TextEncoder {
public:
    TextEncoder(const TextEncoderConfig& config, Rng& rng);

    /// Hidden states [L, hidden] for one sequence of at most max_tokens ids.
    Var hidden_states(const std::vector<std::size_t>& ids) const;
    /// First-token ([CLS]) pooled features [B, hidden].
    Var pooled(const std::vector<std::vector<std::size_t>>& batch) const;

    const TextEncoderConfig& config() const { return config_; }
    nn::ParameterList parameters() const;

private:
    TextEncoderConfig config_;
    nn::Embedding tokens_;
    nn::Embedding positions_;
    std::vector<TransformerBlock> blocks_;
    nn::LayerNorm final_ln_;
};

/// Text encoder plus its linear projector into the shared space.
class TextTower {
public:
    TextTower(const TextEncoderConfig& config, std::size_t shared_dim, Rng& rng);

    /// [B, d]; sequences longer than max_tokens are truncated first.
    Var encode(const std::vector<std::vector<std::size_t>>& batch) const;
    TextEncoder& encoder() { return encoder_; }
    const TextEncoder& encoder() const { return encoder_; }
    /// Names: encoder.*, projector.*
    nn::ParameterList parameters() const;

private:
    TextEncoder encoder_;
    nn::Linear projector_;
};

} // namespace keepfit::encoders
