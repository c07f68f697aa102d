#include "keepfit/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <regex>

#include "keepfit/mlm.hpp"

namespace keepfit::trainer {

namespace fs = std::filesystem;
using nlohmann::json;

void ModelConfig::validate() const {
    image.validate();
    text.validate();
    if (shared_dim == 0) throw UsageError("model: shared_dim must be positive");
    if (attention_heads == 0 || shared_dim % attention_heads != 0 || code_dim % attention_heads != 0) {
        throw UsageError("model: attention_heads must divide shared_dim and code_dim");
    }
    if (!(temperature_init >= kMinTemperature && temperature_init <= kMaxTemperature)) {
        throw UsageError("model: temperature_init must lie in [0.001, 1]");
    }
}

json to_json(const ModelConfig& c) {
    return {{"image", encoders::to_json(c.image)},
            {"text", encoders::to_json(c.text)},
            {"shared_dim", c.shared_dim},
            {"attention_heads", c.attention_heads},
            {"code_dim", c.code_dim},
            {"temperature_init", c.temperature_init}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.image = encoders::image_config_from_json(j.at("image"));
    c.text = encoders::text_config_from_json(j.at("text"));
    c.shared_dim = j.at("shared_dim").get<std::size_t>();
    c.attention_heads = j.at("attention_heads").get<std::size_t>();
    c.code_dim = j.at("code_dim").get<std::size_t>();
    c.temperature_init = j.at("temperature_init").get<double>();
    return c;
}

KeepFitModel::KeepFitModel(const ModelConfig& config, std::uint64_t seed)
    : vision(config.image, config.shared_dim, *std::make_unique<Rng>(Rng(seed).fork(1))),
      text(config.text, config.shared_dim, *std::make_unique<Rng>(Rng(seed).fork(2))),
      spatial(config.image.feature_channels(), config.code_dim, *std::make_unique<Rng>(Rng(seed).fork(3))),
      semantic(knowledge::Flavor::semantic, config.shared_dim, config.shared_dim, config.attention_heads,
               *std::make_unique<Rng>(Rng(seed).fork(4))),
      appearance(knowledge::Flavor::appearance, config.code_dim, config.shared_dim, config.attention_heads,
                 *std::make_unique<Rng>(Rng(seed).fork(5))),
      temperature(Var::parameter(Tensor::scalar(config.temperature_init))),
      config_(config) {
    config.validate();
}

nn::ParameterList KeepFitModel::parameters() const {
    nn::ParameterList p;
    nn::append(p, vision.parameters(), "vision");
    nn::append(p, text.parameters(), "text");
    nn::append(p, spatial.parameters(), "spatial");
    nn::append(p, semantic.parameters(), "semantic");
    nn::append(p, appearance.parameters(), "appearance");
    p.push_back({"temperature", temperature, false});
    return p;
}

nn::ParameterList KeepFitModel::encoder_parameters() const {
    nn::ParameterList p;
    nn::append(p, vision.parameters(), "vision");
    nn::append(p, text.parameters(), "text");
    return p;
}

void KeepFitModel::clamp_temperature() {
    double& t = temperature.mutable_value()[0];
    t = std::clamp(t, kMinTemperature, kMaxTemperature);
}

Checkpoint KeepFitModel::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.kind = "keepfit-model";
    ckpt.meta["model"] = to_json(config_);
    ckpt.put_parameters(parameters(), "");
    return ckpt;
}

void KeepFitModel::load(const Checkpoint& ckpt) {
    if (ckpt.kind != "keepfit-model") throw Error("checkpoint is a '" + ckpt.kind + "', not a keepfit model");
    ckpt.load_parameters(parameters(), "");
}

void TrainConfig::validate() const {
    if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw UsageError("train: lambda1 and lambda2 must be >= 0");
    if (!(lr > 0.0)) throw UsageError("train: lr must be > 0");
    if (!(weight_decay >= 0.0)) throw UsageError("train: weight_decay must be >= 0");
    if (epochs == 0) throw UsageError("train: epochs must be positive");
    if (batch_size == 0) throw UsageError("train: batch_size must be positive");
}

json to_json(const TrainConfig& c) {
    return {{"lambda1", c.lambda1},           {"lambda2", c.lambda2}, {"lr", c.lr},
            {"weight_decay", c.weight_decay}, {"warmup_epochs", c.warmup_epochs},
            {"epochs", c.epochs},             {"batch_size", c.batch_size}, {"seed", c.seed},
            {"ek_elite_gradient", c.ek_elite_gradient}};
}

json LossBreakdown::to_json() const {
    return {{"itc_categorical", itc_categorical},
            {"itc_elite", itc_elite},
            {"ek_semantic", ek_semantic},
            {"ek_appearance", ek_appearance},
            {"total", total}};
}

Objective compute_objective(const KeepFitModel& model, const Batch& elite, const Batch& categorical,
                            const TrainConfig& config, const ibq::Codebook* codebook, const Quantizer& quantizer) {
    if (categorical.size() == 0) throw Error("training step: missing categorical batch");
    const bool knowledge = config.lambda1 > 0.0 || config.lambda2 > 0.0;
    if (elite.size() == 0 && knowledge) throw Error("training step: missing elite batch (needed when lambda1 or lambda2 > 0)");
    if (config.lambda2 > 0.0 && codebook == nullptr) throw Error("training step: lambda2 > 0 requires a codebook");

    Objective out;
    auto vp = model.encode_images(categorical.images, data::Source::categorical);
    Var vp_n = ag::l2_normalize_rows(vp.flat);
    Var tp_n = ag::l2_normalize_rows(model.encode_texts(categorical.tokens));
    auto targets_p = contrastive::build_targets(categorical.size(), contrastive::TargetKind::category_symmetric,
                                                categorical.category_ids);
    Var itc_p = contrastive::contrastive_loss(vp_n, tp_n, model.temperature, targets_p);
    out.breakdown.itc_categorical = itc_p.item();
    Var total = itc_p;

    if (elite.size() > 0) {
        auto vm = model.encode_images(elite.images, data::Source::elite);
        Var vm_n = ag::l2_normalize_rows(vm.flat);
        Var tm_n = ag::l2_normalize_rows(model.encode_texts(elite.tokens));
        auto targets_m = contrastive::build_targets(elite.size(), contrastive::TargetKind::identity, std::nullopt);
        Var itc_m = contrastive::contrastive_loss(vm_n, tm_n, model.temperature, targets_m);
        out.breakdown.itc_elite = itc_m.item();
        total = ag::add(total, itc_m);

        auto elite_side = [&](const Var& v) { return config.ek_elite_gradient ? v : ag::stop_gradient(v); };
        out.semantic = knowledge::semantic_extract(vp_n, elite_side(vm_n), elite_side(tm_n), model.semantic);
        Var ek_s = knowledge::ek_refinement_loss(*out.semantic, tp_n);
        out.breakdown.ek_semantic = ek_s.item();
        if (config.lambda1 > 0.0) total = ag::add(total, ag::scale(ek_s, config.lambda1));

        if (codebook != nullptr) {
            if (codebook->dim() != model.config().code_dim) {
                throw ShapeError("training step: codebook dim " + std::to_string(codebook->dim()) +
                                 " differs from model code_dim " + std::to_string(model.config().code_dim));
            }
            Var table = Var::constant(codebook->embeddings);
            auto qp = quantizer(model.spatial.forward(vp.spatial), table);
            auto qm = quantizer(model.spatial.forward(vm.spatial), table);
            out.appearance = knowledge::appearance_extract(ibq::pool_quantized(qp), elite_side(ibq::pool_quantized(qm)),
                                                           elite_side(tm_n), model.appearance);
            Var ek_a = knowledge::ek_refinement_loss(*out.appearance, tp_n);
            out.breakdown.ek_appearance = ek_a.item();
            if (config.lambda2 > 0.0) total = ag::add(total, ag::scale(ek_a, config.lambda2));
        }
    }
    out.total = total;
    out.breakdown.total = total.item();
    return out;
}

TrainState::TrainState(KeepFitModel model, const TrainConfig& config, std::size_t steps_per_epoch,
                       std::optional<ibq::Codebook> codebook)
    : model_(std::move(model)),
      codebook_(std::move(codebook)),
      optimizer_(model_.parameters(), {.weight_decay = config.weight_decay}),
      schedule_(config.lr, config.warmup_epochs * steps_per_epoch, config.epochs * steps_per_epoch) {
    config.validate();
    if (steps_per_epoch == 0) throw UsageError("train: steps_per_epoch must be positive");
}

LossBreakdown TrainState::step(const Batch& elite, const Batch& categorical, const TrainConfig& config) {
    optimizer_.zero_grad();
    Objective obj = compute_objective(model_, elite, categorical, config, codebook());
    const auto& b = obj.breakdown;
    if (!std::isfinite(b.total)) {
        throw Error("training step " + std::to_string(step_) + ": non-finite loss " + b.to_json().dump());
    }
    ag::backward(obj.total);
    optimizer_.step(schedule_.lr(step_));
    model_.clamp_temperature();
    ++step_;
    telemetry_.push_back(b);
    return b;
}

LossBreakdown training_step(const Batch& elite, const Batch& categorical, TrainState& state, const TrainConfig& config) {
    return state.step(elite, categorical, config);
}

Vocabulary corpus_vocabulary(const data::Corpus& corpus) {
    std::vector<std::string> texts;
    for (const auto& r : corpus.records) {
        if (r.caption) texts.push_back(*r.caption);
    }
    for (const auto& variants : corpus.classes.prompts.variants) {
        for (const auto& v : variants) texts.push_back(v);
    }
    return Vocabulary::build(texts);
}

namespace {

struct Pool {
    std::vector<data::Image> images;
    std::vector<std::vector<std::size_t>> tokens;
    std::vector<int> categories;
};

Batch make_batch(const Pool& pool, const std::vector<std::size_t>& idx, data::Source source, std::size_t size,
                 std::vector<std::vector<std::size_t>> tokens) {
    Batch b;
    b.source = source;
    std::vector<const data::Image*> ptrs;
    for (auto i : idx) ptrs.push_back(&pool.images[i]);
    b.images = data::images_to_tensor(ptrs, size);
    b.tokens = std::move(tokens);
    if (source == data::Source::categorical) {
        std::vector<int> ids;
        for (auto i : idx) ids.push_back(pool.categories[i]);
        b.category_ids = std::move(ids);
    }
    return b;
}

void write_weights(const fs::path& path, const KeepFitModel& model, const Vocabulary& vocab, const json& extra) {
    Checkpoint ckpt = model.to_checkpoint();
    ckpt.meta["vocabulary"] = vocab.tokens();
    for (auto it = extra.begin(); it != extra.end(); ++it) ckpt.meta[it.key()] = it.value();
    save_checkpoint(path, ckpt);
}

} // namespace

TrainResult train(const TrainInputs& inputs, const TrainConfig& config, const fs::path& run_dir) {
    config.validate();
    if (config.lambda2 > 0.0 && !inputs.codebook) {
        throw UsageError("train: lambda2 > 0 requires a pretrained codebook (pass --codebook or set lambda2 = 0)");
    }

    Pool elite, cat;
    for (const auto& r : inputs.corpus.records) {
        data::validate(r);
        if (r.source == data::Source::elite) {
            if (!r.caption) throw Error("train: elite record " + data::record_id(r) + " has no caption");
            elite.images.push_back(data::load_image(r, inputs.corpus_root));
            elite.categories.push_back(r.category_id.value_or(-1));
        } else {
            if (!r.category_id) throw Error("train: categorical record " + data::record_id(r) + " has no category id");
            cat.images.push_back(data::load_image(r, inputs.corpus_root));
            cat.categories.push_back(*r.category_id);
        }
    }
    if (cat.images.empty()) throw Error("train: corpus has no categorical records");
    if (elite.images.empty() && (config.lambda1 > 0.0 || config.lambda2 > 0.0)) {
        throw Error("train: elite corpus is empty but lambda1 or lambda2 > 0");
    }

    ModelConfig model_config = inputs.model;
    Vocabulary vocab;
    if (inputs.text_init) {
        vocab = mlm::vocabulary_from(*inputs.text_init);
        model_config.text = mlm::text_config_from(*inputs.text_init);
    } else {
        vocab = corpus_vocabulary(inputs.corpus);
        model_config.text.vocab_size = vocab.size();
    }
    if (inputs.codebook) model_config.code_dim = inputs.codebook->dim();
    model_config.validate();

    for (const auto& r : inputs.corpus.records) {
        if (r.source != data::Source::elite) continue;
        elite.tokens.push_back(truncate_tokens(vocab.tokenize(*r.caption), model_config.text.max_tokens));
    }

    KeepFitModel model(model_config, config.seed);
    if (inputs.text_init) {
        nn::ParameterList enc;
        nn::append(enc, model.text.encoder().parameters(), "encoder");
        inputs.text_init->load_parameters(enc, "");
    }

    const std::size_t steps_per_epoch = (cat.images.size() + config.batch_size - 1) / config.batch_size;
    TrainState state(std::move(model), config, steps_per_epoch, inputs.codebook);
    const std::string checksum_before = inputs.codebook ? hex64(inputs.codebook->checksum()) : "";

    fs::create_directories(run_dir);
    json snapshot = inputs.config_snapshot;
    if (snapshot.is_null()) snapshot = {{"model", to_json(model_config)}, {"train", to_json(config)}};
    atomic_write(run_dir / "config.json", snapshot.dump(2) + "\n");
    if (inputs.codebook) ibq::save_codebook(run_dir / "codebook.kfc", *inputs.codebook);

    std::ofstream telemetry(run_dir / "telemetry.jsonl", std::ios::trunc);
    if (!telemetry) throw Error("train: cannot write " + (run_dir / "telemetry.jsonl").string());

    Rng rng = Rng(config.seed).fork(0x747261696eULL);
    const std::size_t image_size = model_config.image.input_size;
    std::vector<std::size_t> elite_order(elite.images.size());
    for (std::size_t i = 0; i < elite_order.size(); ++i) elite_order[i] = i;
    std::size_t elite_cursor = elite_order.size();
    const std::size_t elite_batch = std::min(config.batch_size, elite.images.size());

    TrainResult result;
    result.run_dir = run_dir;
    result.best_checkpoint = run_dir / "weights-best.kfw";
    double best = std::numeric_limits<double>::infinity();
    const json run_meta = {{"train", to_json(config)},
                           {"codebook", inputs.codebook ? json(inputs.codebook->fingerprint) : json(nullptr)}};

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<std::size_t> order(cat.images.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        LossBreakdown sum;
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            const std::size_t lo = s * config.batch_size;
            const std::size_t hi = std::min(order.size(), lo + config.batch_size);
            std::vector<std::size_t> cat_idx(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                             order.begin() + static_cast<std::ptrdiff_t>(hi));
            std::vector<std::vector<std::size_t>> cat_tokens;
            for (auto i : cat_idx) {
                const std::string text = data::expand_category_to_text(cat.categories[i], inputs.corpus.classes.prompts, rng);
                cat_tokens.push_back(truncate_tokens(vocab.tokenize(text), model_config.text.max_tokens));
            }
            Batch cat_batch = make_batch(cat, cat_idx, data::Source::categorical, image_size, std::move(cat_tokens));

            Batch elite_batch_data;
            elite_batch_data.source = data::Source::elite;
            if (elite_batch > 0) {
                std::vector<std::size_t> idx;
                while (idx.size() < elite_batch) {
                    if (elite_cursor == elite_order.size()) {
                        rng.shuffle(elite_order);
                        elite_cursor = 0;
                    }
                    idx.push_back(elite_order[elite_cursor++]);
                }
                std::vector<std::vector<std::size_t>> toks;
                for (auto i : idx) toks.push_back(elite.tokens[i]);
                elite_batch_data = make_batch(elite, idx, data::Source::elite, image_size, std::move(toks));
            }

            const double lr = state.lr_at(state.step());
            LossBreakdown b = training_step(elite_batch_data, cat_batch, state, config);
            sum.itc_categorical += b.itc_categorical;
            sum.itc_elite += b.itc_elite;
            sum.ek_semantic += b.ek_semantic;
            sum.ek_appearance += b.ek_appearance;
            sum.total += b.total;
            json line = b.to_json();
            line["kind"] = "step";
            line["step"] = state.step() - 1;
            line["epoch"] = epoch;
            line["lr"] = lr;
            line["temperature"] = state.model().temperature_value();
            telemetry << line.dump() << "\n";
        }
        const double n = static_cast<double>(steps_per_epoch);
        LossBreakdown mean{sum.itc_categorical / n, sum.itc_elite / n, sum.ek_semantic / n, sum.ek_appearance / n,
                           sum.total / n};
        json line = mean.to_json();
        line["kind"] = "epoch";
        line["epoch"] = epoch;
        line["step"] = state.step();
        line["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        telemetry << line.dump() << "\n";
        telemetry.flush();
        if (inputs.on_epoch) inputs.on_epoch(line);

        if (mean.total < best) {
            best = mean.total;
            json extra = run_meta;
            extra["step"] = state.step();
            extra["epoch"] = epoch;
            extra["epoch_mean_loss"] = mean.total;
            write_weights(result.best_checkpoint, state.model(), vocab, extra);
        }
    }

    json extra = run_meta;
    extra["step"] = state.step();
    extra["epoch"] = config.epochs - 1;
    result.last_checkpoint = run_dir / ("weights-" + std::to_string(state.step()) + ".kfw");
    write_weights(result.last_checkpoint, state.model(), vocab, extra);

    result.steps = state.step();
    result.telemetry = state.telemetry();
    result.codebook_checksum_before = checksum_before;
    result.codebook_checksum_after = state.codebook() ? hex64(state.codebook()->checksum()) : "";
    if (result.codebook_checksum_before != result.codebook_checksum_after) {
        throw Error("train: codebook changed during training (" + result.codebook_checksum_before + " -> " +
                    result.codebook_checksum_after + ")");
    }
    return result;
}

LoadedModel load_model(const fs::path& weights) {
    Checkpoint ckpt = load_checkpoint(weights);
    if (ckpt.kind != "keepfit-model") throw Error(weights.string() + " is a '" + ckpt.kind + "', not a keepfit model");
    LoadedModel out;
    ModelConfig config = model_config_from_json(ckpt.meta.at("model"));
    out.model = std::make_unique<KeepFitModel>(config, 0);
    out.model->load(ckpt);
    out.vocabulary = Vocabulary::from_tokens(ckpt.meta.at("vocabulary").get<std::vector<std::string>>());
    out.meta = ckpt.meta;
    return out;
}

fs::path find_weights(const fs::path& run_dir) {
    if (fs::is_regular_file(run_dir)) return run_dir;
    if (fs::exists(run_dir / "weights-best.kfw")) return run_dir / "weights-best.kfw";
    static const std::regex pattern("weights-([0-9]+)\\.kfw");
    fs::path found;
    long best = -1;
    if (fs::is_directory(run_dir)) {
        for (const auto& entry : fs::directory_iterator(run_dir)) {
            std::smatch m;
            const std::string name = entry.path().filename().string();
            if (std::regex_match(name, m, pattern) && std::stol(m[1]) > best) {
                best = std::stol(m[1]);
                found = entry.path();
            }
        }
    }
    if (found.empty()) throw Error("no weights found in " + run_dir.string());
    return found;
}

} // namespace keepfit::trainer
