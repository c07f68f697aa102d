#include "keepfit/ibq.hpp"

#include <cmath>
#include <map>

#include "keepfit/optim.hpp"

namespace keepfit::ibq {

std::uint64_t Codebook::checksum() const {
    return fnv1a(embeddings.data(), embeddings.size() * sizeof(double));
}

Checkpoint to_checkpoint(const Codebook& codebook, const nlohmann::json& report) {
    Checkpoint c;
    c.kind = "codebook";
    c.meta["K"] = codebook.size();
    c.meta["D"] = codebook.dim();
    c.meta["fingerprint"] = codebook.fingerprint;
    if (!report.is_null()) c.meta["report"] = report;
    c.put("codebook", codebook.embeddings);
    return c;
}

Codebook codebook_from(const Checkpoint& ckpt) {
    if (ckpt.kind != "codebook") throw Error("expected a codebook checkpoint, got '" + ckpt.kind + "'");
    Codebook cb{ckpt.tensor("codebook"), ckpt.meta.value("fingerprint", std::string{})};
    if (cb.embeddings.rank() != 2 || cb.size() != ckpt.meta.at("K").get<std::size_t>() ||
        cb.dim() != ckpt.meta.at("D").get<std::size_t>()) {
        throw Error("codebook checkpoint: K/D header disagrees with the stored matrix");
    }
    return cb;
}

void save_codebook(const std::filesystem::path& path, const Codebook& codebook, const nlohmann::json& report) {
    save_checkpoint(path, to_checkpoint(codebook, report));
}

Codebook load_codebook(const std::filesystem::path& path) { return codebook_from(load_checkpoint(path)); }

SpatialProjection::SpatialProjection(std::size_t channels, std::size_t code_dim, Rng& rng)
    : linear_(channels, code_dim, true, rng) {}

Var SpatialProjection::forward(const Var& spatial) const {
    const auto& s = spatial.shape();
    if (s.size() != 4) throw ShapeError("project_spatial: expected [B,h,w,c], got " + shape_str(s));
    if (s[3] != linear_.in_features()) {
        throw ShapeError("project_spatial: channel mismatch, map has " + std::to_string(s[3]) + ", projection expects " +
                         std::to_string(linear_.in_features()));
    }
    const std::size_t positions = s[1] * s[2];
    Var flat = linear_.forward(ag::reshape(spatial, {s[0] * positions, s[3]}));
    return ag::reshape(flat, {s[0], positions, linear_.out_features()});
}

QuantizedBatch quantize(const Var& projected, const Var& codebook) {
    const auto& s = projected.shape();
    if (s.size() != 3) throw ShapeError("quantize: expected [B,P,D], got " + shape_str(s));
    if (codebook.value().rank() != 2 || codebook.value().dim(1) != s[2]) {
        throw ShapeError("quantize: feature dim " + std::to_string(s[2]) + " vs codebook " + shape_str(codebook.shape()));
    }
    QuantizedBatch q;
    q.batch = s[0];
    q.positions = s[1];
    Var flat = ag::reshape(projected, {s[0] * s[1], s[2]});
    q.logits = ag::matmul(flat, codebook, false, true);
    q.index = ag::straight_through_onehot(q.logits);
    {
        ag::NoGradGuard no_grad;
        q.soft_distribution = ag::softmax_rows(Var::constant(q.logits.value())).value();
    }
    const std::size_t k = codebook.value().dim(0);
    q.hard_indices.resize(s[0] * s[1]);
    for (std::size_t r = 0; r < q.hard_indices.size(); ++r) {
        const double* row = q.index.value().data() + r * k;
        q.hard_indices[r] = static_cast<std::size_t>(std::find(row, row + k, 1.0) - row);
    }
    q.codes = ag::reshape(ag::matmul(q.index, codebook), {s[0], s[1], s[2]});
    return q;
}

Var pool_quantized(const QuantizedBatch& q) {
    if (q.positions == 0) throw ShapeError("pool_quantized: no positions");
    const std::size_t d = q.codes.shape()[2];
    return ag::mean_row_groups(ag::reshape(q.codes, {q.batch * q.positions, d}), q.positions);
}

void AutoencoderConfig::validate() const {
    if (codebook_size < 2 || code_dim == 0) throw UsageError("codebook: size must be >= 2 and dim positive");
    if (input_size % 4 != 0) throw UsageError("codebook: input_size must be divisible by 4");
    if (batch_size == 0 || steps == 0) throw UsageError("codebook: steps and batch_size must be positive");
    if (!(lr > 0.0)) throw UsageError("codebook: lr must be positive");
}

nlohmann::json to_json(const AutoencoderConfig& c) {
    return {{"codebook_size", c.codebook_size}, {"code_dim", c.code_dim},   {"input_size", c.input_size},
            {"hidden_channels", c.hidden_channels}, {"steps", c.steps},     {"batch_size", c.batch_size},
            {"lr", c.lr},                         {"commitment_beta", c.commitment_beta}, {"entropy_weight", c.entropy_weight},
            {"seed", c.seed}};
}

nlohmann::json CodebookReport::summary() const {
    return {{"utilization", utilization},
            {"perplexity", perplexity},
            {"initial_loss", reconstruction_losses.empty() ? 0.0 : reconstruction_losses.front()},
            {"final_loss", reconstruction_losses.empty() ? 0.0 : reconstruction_losses.back()}};
}

CodeUsage code_usage(const std::vector<std::size_t>& indices, std::size_t codebook_size) {
    std::vector<std::size_t> counts(codebook_size, 0);
    for (auto i : indices) ++counts.at(i);
    std::size_t used = 0;
    double entropy = 0.0;
    for (auto c : counts) {
        if (c == 0) continue;
        ++used;
        const double p = static_cast<double>(c) / static_cast<double>(indices.size());
        entropy -= p * std::log(p);
    }
    return {static_cast<double>(used) / static_cast<double>(codebook_size), std::exp(entropy)};
}

Tensor patchify(const Tensor& images, std::size_t factor) {
    const std::size_t b = images.dim(0), s = images.dim(1), c = images.dim(3);
    const std::size_t g = s / factor;
    Tensor out({b * g * g, factor * factor * c});
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t gy = 0; gy < g; ++gy)
            for (std::size_t gx = 0; gx < g; ++gx) {
                double* dst = out.data() + ((n * g + gy) * g + gx) * factor * factor * c;
                for (std::size_t py = 0; py < factor; ++py)
                    for (std::size_t px = 0; px < factor; ++px)
                        for (std::size_t ch = 0; ch < c; ++ch)
                            *dst++ = images[((n * s + gy * factor + py) * s + gx * factor + px) * c + ch];
            }
    return out;
}

namespace {

// Mean per-token entropy minus entropy of the batch-averaged distribution:
// confident assignments that still spread over the whole codebook.
Var usage_entropy_penalty(const Var& logits) {
    const std::size_t n = logits.value().rows();
    Var p = ag::softmax_rows(logits);
    Var token_entropy = ag::scale(ag::sum(ag::mul(p, ag::log_floor(p, 1e-12))), -1.0 / static_cast<double>(n));
    Var avg = ag::scale(ag::matmul(Var::constant(Tensor({1, n}, 1.0)), p), 1.0 / static_cast<double>(n));
    Var batch_entropy = ag::scale(ag::sum(ag::mul(avg, ag::log_floor(avg, 1e-12))), -1.0);
    return ag::sub(token_entropy, batch_entropy);
}

struct Autoencoder {
    nn::Conv2d enc1, enc2;
    SpatialProjection to_code;
    nn::Linear dec1, dec2;

    Autoencoder(const AutoencoderConfig& c, Rng& rng)
        : enc1(3, c.hidden_channels, 3, 2, 1, rng),
          enc2(c.hidden_channels, 2 * c.hidden_channels, 3, 2, 1, rng),
          to_code(2 * c.hidden_channels, c.code_dim, rng),
          dec1(c.code_dim, 4 * c.hidden_channels, true, rng),
          dec2(4 * c.hidden_channels, 4 * 4 * 3, true, rng) {}

    Var encode(const Tensor& images) const {
        return to_code.forward(ag::relu(enc2.forward(ag::relu(enc1.forward(Var::constant(images))))));
    }

    Var decode(const Var& codes) const {
        const auto& s = codes.shape();
        return dec2.forward(ag::relu(dec1.forward(ag::reshape(codes, {s[0] * s[1], s[2]}))));
    }

    nn::ParameterList parameters() const {
        nn::ParameterList p;
        nn::append(p, enc1.parameters(), "enc1");
        nn::append(p, enc2.parameters(), "enc2");
        nn::append(p, to_code.parameters(), "to_code");
        nn::append(p, dec1.parameters(), "dec1");
        nn::append(p, dec2.parameters(), "dec2");
        return p;
    }
};

} // namespace

CodebookReport pretrain_codebook(const std::vector<data::Image>& images, const AutoencoderConfig& config) {
    if (images.empty()) throw Error("pretrain_codebook: empty image corpus");
    config.validate();

    Rng rng(config.seed);
    Autoencoder ae(config, rng);
    Var codebook = Var::parameter(nn::normal_tensor({config.codebook_size, config.code_dim}, 1.0, rng));
    nn::ParameterList params = ae.parameters();
    params.push_back({"codebook", codebook, false});
    optim::AdamW opt(params, {.weight_decay = 0.0});

    std::vector<const data::Image*> all;
    for (const auto& im : images) all.push_back(&im);

    CodebookReport report;
    std::vector<std::size_t> order(images.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t cursor = order.size();
    for (std::size_t step = 0; step < config.steps; ++step) {
        std::vector<const data::Image*> batch;
        for (std::size_t b = 0; b < std::min(config.batch_size, images.size()); ++b) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            batch.push_back(all[order[cursor++]]);
        }
        const Tensor x = data::images_to_tensor(batch, config.input_size);
        opt.zero_grad();
        Var z = ae.encode(x);
        QuantizedBatch q = quantize(z, codebook);
        Var recon = ae.decode(q.codes);
        Var target = Var::constant(patchify(x, 4));
        Var rec_loss = ag::mean(ag::square(ag::sub(recon, target)));
        Var commit = ag::mean(ag::square(ag::sub(z, ag::stop_gradient(q.codes))));
        Var code_pull = ag::mean(ag::square(ag::sub(ag::stop_gradient(z), q.codes)));
        Var loss = ag::add(ag::add(rec_loss, code_pull), ag::scale(commit, config.commitment_beta));
        if (config.entropy_weight > 0.0) {
            loss = ag::add(loss, ag::scale(usage_entropy_penalty(q.logits), config.entropy_weight));
        }
        if (!std::isfinite(loss.item())) {
            throw Error("pretrain_codebook: loss diverged at step " + std::to_string(step) + " (reconstruction " +
                        std::to_string(rec_loss.item()) + ", commitment " + std::to_string(commit.item()) + ")");
        }
        report.reconstruction_losses.push_back(rec_loss.item());
        ag::backward(loss);
        opt.step(config.lr);
    }

    std::vector<std::size_t> probe_indices;
    {
        ag::NoGradGuard no_grad;
        for (std::size_t start = 0; start < all.size(); start += 32) {
            std::vector<const data::Image*> chunk(all.begin() + static_cast<std::ptrdiff_t>(start),
                                                  all.begin() + static_cast<std::ptrdiff_t>(std::min(all.size(), start + 32)));
            auto q = quantize(ae.encode(data::images_to_tensor(chunk, config.input_size)), codebook);
            probe_indices.insert(probe_indices.end(), q.hard_indices.begin(), q.hard_indices.end());
        }
    }
    const auto usage = code_usage(probe_indices, config.codebook_size);
    report.utilization = usage.utilization;
    report.perplexity = usage.perplexity;

    report.codebook.embeddings = codebook.value();
    std::uint64_t h = fnv1a(to_json(config).dump().data(), to_json(config).dump().size());
    for (const auto& im : images) h = fnv1a(im.pixels.data(), im.pixels.size(), h);
    report.codebook.fingerprint = hex64(h);
    return report;
}

} // namespace keepfit::ibq
