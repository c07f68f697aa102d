#include "keepfit/encoders.hpp"

#include <cmath>

namespace keepfit::encoders {

void ImageEncoderConfig::validate() const {
    if (channels.empty() || channels.size() != strides.size()) {
        throw UsageError("image encoder: channels and strides must be non-empty and of equal length");
    }
    for (auto s : strides)
        if (s == 0) throw UsageError("image encoder: stride 0");
    for (auto c : channels)
        if (c == 0) throw UsageError("image encoder: zero channels");
    if (input_size == 0 || input_size % downsampling() != 0) {
        throw UsageError("image encoder: input_size " + std::to_string(input_size) +
                         " not divisible by total downsampling " + std::to_string(downsampling()));
    }
}

std::size_t ImageEncoderConfig::downsampling() const {
    std::size_t f = 1;
    for (auto s : strides) f *= s;
    return f;
}

void TextEncoderConfig::validate() const {
    if (vocab_size <= Vocabulary::kNumSpecial) throw UsageError("text encoder: vocabulary too small");
    if (max_tokens < 2) throw UsageError("text encoder: max_tokens must be >= 2");
    if (hidden_dim == 0 || n_heads == 0 || hidden_dim % n_heads != 0) {
        throw UsageError("text encoder: hidden_dim must be a positive multiple of n_heads");
    }
    if (n_layers == 0 || ffn_dim == 0) throw UsageError("text encoder: n_layers and ffn_dim must be positive");
}

nlohmann::json to_json(const ImageEncoderConfig& c) {
    return {{"backbone", c.backbone == Backbone::small_conv ? "small-conv" : "resnet-like"},
            {"input_size", c.input_size},
            {"channels", c.channels},
            {"strides", c.strides}};
}

ImageEncoderConfig image_config_from_json(const nlohmann::json& j) {
    ImageEncoderConfig c;
    const auto b = j.at("backbone").get<std::string>();
    if (b == "small-conv") {
        c.backbone = Backbone::small_conv;
    } else if (b == "resnet-like") {
        c.backbone = Backbone::resnet_like;
    } else {
        throw UsageError("unknown image backbone '" + b + "'");
    }
    c.input_size = j.at("input_size").get<std::size_t>();
    c.channels = j.at("channels").get<std::vector<std::size_t>>();
    c.strides = j.at("strides").get<std::vector<std::size_t>>();
    return c;
}

nlohmann::json to_json(const TextEncoderConfig& c) {
    return {{"vocab_size", c.vocab_size}, {"max_tokens", c.max_tokens}, {"hidden_dim", c.hidden_dim},
            {"n_layers", c.n_layers},     {"n_heads", c.n_heads},       {"ffn_dim", c.ffn_dim}};
}

TextEncoderConfig text_config_from_json(const nlohmann::json& j) {
    TextEncoderConfig c;
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_tokens = j.at("max_tokens").get<std::size_t>();
    c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    return c;
}

namespace {

class SmallConvBackbone final : public ImageBackbone {
public:
    SmallConvBackbone(const ImageEncoderConfig& c, Rng& rng) {
        std::size_t in = 3;
        for (std::size_t i = 0; i < c.channels.size(); ++i) {
            convs_.emplace_back(in, c.channels[i], 3, c.strides[i], 1, rng);
            in = c.channels[i];
        }
    }

    Var forward(const Var& images) const override {
        Var x = images;
        for (const auto& conv : convs_) x = ag::relu(conv.forward(x));
        return x;
    }

    nn::ParameterList parameters() const override {
        nn::ParameterList out;
        for (std::size_t i = 0; i < convs_.size(); ++i) nn::append(out, convs_[i].parameters(), "conv" + std::to_string(i));
        return out;
    }

private:
    std::vector<nn::Conv2d> convs_;
};

/// Basic residual blocks: conv-relu-conv plus a (projected) shortcut.
class ResnetLikeBackbone final : public ImageBackbone {
public:
    ResnetLikeBackbone(const ImageEncoderConfig& c, Rng& rng) {
        std::size_t in = 3;
        for (std::size_t i = 0; i < c.channels.size(); ++i) {
            Block b;
            b.conv1 = nn::Conv2d(in, c.channels[i], 3, c.strides[i], 1, rng);
            b.conv2 = nn::Conv2d(c.channels[i], c.channels[i], 3, 1, 1, rng);
            if (in != c.channels[i] || c.strides[i] != 1) {
                b.shortcut = nn::Conv2d(in, c.channels[i], 1, c.strides[i], 0, rng);
                b.has_shortcut = true;
            }
            blocks_.push_back(std::move(b));
            in = c.channels[i];
        }
    }

    Var forward(const Var& images) const override {
        Var x = images;
        for (const auto& b : blocks_) {
            Var h = b.conv2.forward(ag::relu(b.conv1.forward(x)));
            Var skip = b.has_shortcut ? b.shortcut.forward(x) : x;
            x = ag::relu(ag::add(h, skip));
        }
        return x;
    }

    nn::ParameterList parameters() const override {
        nn::ParameterList out;
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const std::string p = "block" + std::to_string(i);
            nn::append(out, blocks_[i].conv1.parameters(), p + ".conv1");
            nn::append(out, blocks_[i].conv2.parameters(), p + ".conv2");
            if (blocks_[i].has_shortcut) nn::append(out, blocks_[i].shortcut.parameters(), p + ".shortcut");
        }
        return out;
    }

private:
    struct Block {
        nn::Conv2d conv1, conv2, shortcut;
        bool has_shortcut = false;
    };
    std::vector<Block> blocks_;
};

} // namespace

std::unique_ptr<ImageBackbone> make_backbone(const ImageEncoderConfig& config, Rng& rng) {
    config.validate();
    if (config.backbone == Backbone::resnet_like) return std::make_unique<ResnetLikeBackbone>(config, rng);
    return std::make_unique<SmallConvBackbone>(config, rng);
}

VisionTower::VisionTower(const ImageEncoderConfig& config, std::size_t shared_dim, Rng& rng)
    : config_(config), backbone_(make_backbone(config, rng)), projector_(config.feature_channels(), shared_dim, false, rng) {}

EncodedBatch VisionTower::encode(const Tensor& images, data::Source source) const {
    if (images.rank() != 4 || images.dim(1) != config_.input_size || images.dim(2) != config_.input_size ||
        images.dim(3) != 3) {
        throw ShapeError("encode_images: expected [B," + std::to_string(config_.input_size) + "," +
                         std::to_string(config_.input_size) + ",3], got " + shape_str(images.shape()));
    }
    EncodedBatch out;
    out.source = source;
    out.spatial = backbone_->forward(Var::constant(images));
    const auto& s = out.spatial.shape();
    const std::size_t positions = s[1] * s[2];
    Var pooled = ag::mean_row_groups(ag::reshape(out.spatial, {s[0] * positions, s[3]}), positions);
    out.flat = projector_.forward(pooled);
    return out;
}

nn::ParameterList VisionTower::parameters() const {
    nn::ParameterList out;
    nn::append(out, backbone_->parameters(), "backbone");
    nn::append(out, projector_.parameters(), "projector");
    return out;
}

TransformerBlock::TransformerBlock(std::size_t hidden, std::size_t heads, std::size_t ffn, Rng& rng)
    : heads_(heads),
      ln1_(hidden),
      ln2_(hidden),
      q_(hidden, hidden, true, rng),
      k_(hidden, hidden, true, rng),
      v_(hidden, hidden, true, rng),
      o_(hidden, hidden, true, rng),
      fc1_(hidden, ffn, true, rng),
      fc2_(ffn, hidden, true, rng) {}

Var TransformerBlock::forward(const Var& x) const {
    const std::size_t hidden = x.value().cols();
    const std::size_t hd = hidden / heads_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    Var h = ln1_.forward(x);
    Var q = q_.forward(h), k = k_.forward(h), v = v_.forward(h);
    std::vector<Var> outs;
    for (std::size_t head = 0; head < heads_; ++head) {
        Var qh = ag::slice_cols(q, head * hd, hd);
        Var kh = ag::slice_cols(k, head * hd, hd);
        Var vh = ag::slice_cols(v, head * hd, hd);
        Var attn = ag::softmax_rows(ag::scale(ag::matmul(qh, kh, false, true), scale));
        outs.push_back(ag::matmul(attn, vh));
    }
    Var x1 = ag::add(x, o_.forward(heads_ == 1 ? outs[0] : ag::concat_cols(outs)));
    Var m = fc2_.forward(ag::gelu(fc1_.forward(ln2_.forward(x1))));
    return ag::add(x1, m);
}

nn::ParameterList TransformerBlock::parameters() const {
    nn::ParameterList out;
    nn::append(out, ln1_.parameters(), "ln1");
    nn::append(out, q_.parameters(), "q");
    nn::append(out, k_.parameters(), "k");
    nn::append(out, v_.parameters(), "v");
    nn::append(out, o_.parameters(), "o");
    nn::append(out, ln2_.parameters(), "ln2");
    nn::append(out, fc1_.parameters(), "fc1");
    nn::append(out, fc2_.parameters(), "fc2");
    return out;
}

TextEncoder::TextEncoder(const TextEncoderConfig& config, Rng& rng)
    : config_(config),
      tokens_((config.validate(), config.vocab_size), config.hidden_dim, rng),
      positions_(config.max_tokens, config.hidden_dim, rng),
      final_ln_(config.hidden_dim) {
    for (std::size_t i = 0; i < config.n_layers; ++i) blocks_.emplace_back(config.hidden_dim, config.n_heads, config.ffn_dim, rng);
}

Var TextEncoder::hidden_states(const std::vector<std::size_t>& ids) const {
    if (ids.empty()) throw ShapeError("text encoder: empty token sequence");
    if (ids.size() > config_.max_tokens) {
        throw ShapeError("text encoder: " + std::to_string(ids.size()) + " tokens exceed max_tokens " +
                         std::to_string(config_.max_tokens));
    }
    for (auto id : ids) {
        if (id >= config_.vocab_size) {
            throw Error("text encoder: token id " + std::to_string(id) + " out of vocabulary range " +
                        std::to_string(config_.vocab_size));
        }
    }
    std::vector<std::size_t> pos(ids.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
    Var x = ag::add(tokens_.forward(ids), positions_.forward(pos));
    for (const auto& b : blocks_) x = b.forward(x);
    return final_ln_.forward(x);
}

Var TextEncoder::pooled(const std::vector<std::vector<std::size_t>>& batch) const {
    if (batch.empty()) throw ShapeError("text encoder: empty batch");
    std::vector<Var> rows;
    rows.reserve(batch.size());
    for (const auto& ids : batch) rows.push_back(ag::gather_rows(hidden_states(ids), {0}));
    return rows.size() == 1 ? rows[0] : ag::concat_rows(rows);
}

nn::ParameterList TextEncoder::parameters() const {
    nn::ParameterList out;
    nn::append(out, tokens_.parameters(), "tokens");
    nn::append(out, positions_.parameters(), "positions");
    for (std::size_t i = 0; i < blocks_.size(); ++i) nn::append(out, blocks_[i].parameters(), "block" + std::to_string(i));
    nn::append(out, final_ln_.parameters(), "final_ln");
    return out;
}

TextTower::TextTower(const TextEncoderConfig& config, std::size_t shared_dim, Rng& rng)
    : encoder_(config, rng), projector_(config.hidden_dim, shared_dim, false, rng) {}

Var TextTower::encode(const std::vector<std::vector<std::size_t>>& batch) const {
    std::vector<std::vector<std::size_t>> truncated;
    truncated.reserve(batch.size());
    for (const auto& ids : batch) truncated.push_back(truncate_tokens(ids, encoder_.config().max_tokens));
    return projector_.forward(encoder_.pooled(truncated));
}

nn::ParameterList TextTower::parameters() const {
    nn::ParameterList out;
    nn::append(out, encoder_.parameters(), "encoder");
    nn::append(out, projector_.parameters(), "projector");
    return out;
}

} // namespace keepfit::encoders
