#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>

#include "gradcheck.hpp"
#include "keepfit/trainer.hpp"

using namespace keepfit;
using namespace keepfit::trainer;
using ag::Var;

namespace {

ModelConfig tiny_model(std::size_t vocab) {
    ModelConfig m;
    m.image.input_size = 8;
    m.image.channels = {4, 8};
    m.image.strides = {2, 2};
    m.text.vocab_size = vocab;
    m.text.max_tokens = 16;
    m.text.hidden_dim = 8;
    m.text.n_layers = 1;
    m.text.n_heads = 2;
    m.text.ffn_dim = 8;
    m.shared_dim = 8;
    m.attention_heads = 2;
    m.code_dim = 8;
    return m;
}

ibq::Codebook random_codebook(std::size_t k, std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    return {testing::random_tensor({k, d}, rng), "test"};
}

Batch random_batch(std::size_t b, std::size_t vocab, data::Source source, Rng& rng) {
    Batch batch;
    batch.source = source;
    batch.images = testing::random_tensor({b, 8, 8, 3}, rng);
    for (std::size_t i = 0; i < b; ++i) {
        std::vector<std::size_t> ids{Vocabulary::kCls};
        for (int t = 0; t < 3; ++t) ids.push_back(Vocabulary::kNumSpecial + rng.below(vocab - Vocabulary::kNumSpecial));
        batch.tokens.push_back(ids);
    }
    if (source == data::Source::categorical) {
        std::vector<int> ids;
        for (std::size_t i = 0; i < b; ++i) ids.push_back(static_cast<int>(i % 2));
        batch.category_ids = ids;
    }
    return batch;
}

data::Corpus small_corpus(int classes, int elite, int categorical, std::size_t size) {
    data::SyntheticCorpusSpec spec;
    spec.n_classes = classes;
    spec.n_elite = elite;
    spec.n_categorical = categorical;
    spec.image_size = size;
    return data::generate_synthetic_corpus(spec);
}

std::filesystem::path scratch(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("keepfit-test-trainer-" + name);
    std::filesystem::remove_all(dir);
    return dir;
}

} // namespace

TEST_CASE("zero lambdas reduce the objective to the two contrastive terms") {
    Rng rng(1);
    KeepFitModel model(tiny_model(20), 0);
    const auto cb = random_codebook(8, 8, 2);
    const Batch elite = random_batch(3, 20, data::Source::elite, rng), cat = random_batch(4, 20, data::Source::categorical, rng);
    TrainConfig config;
    config.lambda1 = 0.0;
    config.lambda2 = 0.0;
    const Objective obj = compute_objective(model, elite, cat, config, &cb);
    CHECK(obj.breakdown.total == obj.breakdown.itc_categorical + obj.breakdown.itc_elite);
    CHECK(obj.breakdown.ek_semantic > 0.0);
    CHECK(obj.breakdown.ek_appearance > 0.0);
}

TEST_CASE("the breakdown satisfies the weighted-sum accounting identity") {
    Rng rng(3);
    KeepFitModel model(tiny_model(20), 1);
    const auto cb = random_codebook(8, 8, 4);
    const Batch elite = random_batch(4, 20, data::Source::elite, rng), cat = random_batch(4, 20, data::Source::categorical, rng);
    const TrainConfig config;
    const LossBreakdown b = compute_objective(model, elite, cat, config, &cb).breakdown;
    const double expected = b.itc_categorical + b.itc_elite + config.lambda1 * b.ek_semantic + config.lambda2 * b.ek_appearance;
    CHECK(std::abs(b.total - expected) <= 1e-9 * std::max(1.0, std::abs(expected)));
}

TEST_CASE("every trainable group receives gradient when both lambdas are positive") {
    Rng rng(5);
    KeepFitModel model(tiny_model(20), 2);
    const auto cb = random_codebook(8, 8, 6);
    const Batch elite = random_batch(4, 20, data::Source::elite, rng), cat = random_batch(4, 20, data::Source::categorical, rng);
    TrainConfig config;
    config.lambda1 = 2.0;
    config.lambda2 = 3.0;
    ag::backward(compute_objective(model, elite, cat, config, &cb).total);
    std::map<std::string, double> group_norm;
    for (const auto& p : model.parameters()) {
        const std::string group = p.name.substr(0, p.name.find('.'));
        double s = 0.0;
        for (double g : p.var.grad().storage()) s += g * g;
        group_norm[group] += s;
    }
    for (const char* g : {"vision", "text", "spatial", "semantic", "appearance", "temperature"}) {
        INFO(g);
        CHECK(group_norm[g] > 0.0);
    }
}

TEST_CASE("temperature is not weight-decayed and is clamped after each step") {
    Rng rng(7);
    KeepFitModel model(tiny_model(20), 3);
    bool found = false;
    for (const auto& p : model.parameters()) {
        if (p.name == "temperature") {
            found = true;
            CHECK_FALSE(p.weight_decay);
        }
    }
    CHECK(found);
    model.temperature.mutable_value()[0] = 5.0;
    TrainConfig config;
    config.lambda1 = 0.0;
    config.lambda2 = 0.0;
    TrainState state(std::move(model), config, 4, std::nullopt);
    state.step(random_batch(2, 20, data::Source::elite, rng), random_batch(4, 20, data::Source::categorical, rng), config);
    CHECK(state.model().temperature_value() <= kMaxTemperature);
}

TEST_CASE("warmup: lr at step 0 is below the peak reached at the end of epoch 1") {
    TrainConfig config;
    config.epochs = 3;
    TrainState state(KeepFitModel(tiny_model(20), 0), config, 25, std::nullopt);
    CHECK(state.lr_at(0) < state.lr_at(24));
    CHECK(state.lr_at(24) == doctest::Approx(config.lr).epsilon(1e-15));
    CHECK(state.lr_at(25) == doctest::Approx(config.lr).epsilon(1e-12));
    CHECK(state.lr_at(26) < config.lr);
    CHECK(state.lr_at(74) < state.lr_at(25));
}

TEST_CASE("missing inputs are rejected") {
    Rng rng(8);
    KeepFitModel model(tiny_model(20), 0);
    const Batch elite = random_batch(2, 20, data::Source::elite, rng), cat = random_batch(2, 20, data::Source::categorical, rng);
    const Batch empty;
    const TrainConfig config;
    CHECK_THROWS_AS(compute_objective(model, elite, empty, config, nullptr), Error);
    const auto cb = random_codebook(8, 8, 1);
    CHECK_THROWS_AS(compute_objective(model, empty, cat, config, &cb), Error);
    try {
        compute_objective(model, elite, cat, config, nullptr);
        FAIL("expected a codebook error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("codebook") != std::string::npos);
    }
    TrainConfig no_knowledge;
    no_knowledge.lambda1 = 0.0;
    no_knowledge.lambda2 = 0.0;
    CHECK_NOTHROW(compute_objective(model, empty, cat, no_knowledge, nullptr));
}

TEST_CASE("train refuses lambda2 > 0 without a codebook and zero epochs") {
    TrainInputs in;
    in.corpus = small_corpus(2, 4, 4, 8);
    in.model = tiny_model(0);
    TrainConfig config;
    CHECK_THROWS_WITH_AS(train(in, config, scratch("nocb")), doctest::Contains("codebook"), UsageError);
    config.epochs = 0;
    config.lambda2 = 0.0;
    CHECK_THROWS_AS(train(in, config, scratch("zero")), UsageError);
}

TEST_CASE("a non-finite loss aborts with the component breakdown") {
    Rng rng(9);
    TrainConfig config;
    config.lambda2 = 0.0;
    TrainState state(KeepFitModel(tiny_model(20), 0), config, 4, std::nullopt);
    Batch cat = random_batch(2, 20, data::Source::categorical, rng);
    cat.images[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH_AS(state.step(random_batch(2, 20, data::Source::elite, rng), cat, config),
                         doctest::Contains("itc_categorical"), Error);
}

TEST_CASE("fixed seed gives bit-identical checkpoints and the codebook stays frozen") {
    TrainInputs in;
    in.corpus = small_corpus(2, 6, 12, 8);
    in.model = tiny_model(0);
    in.codebook = random_codebook(8, 8, 3);
    TrainConfig config;
    config.epochs = 2;
    config.batch_size = 4;
    const TrainResult a = train(in, config, scratch("det-a"));
    const TrainResult b = train(in, config, scratch("det-b"));
    CHECK(a.steps == 6);
    CHECK(read_file(a.last_checkpoint) == read_file(b.last_checkpoint));
    CHECK(read_file(a.best_checkpoint) == read_file(b.best_checkpoint));
    CHECK(a.codebook_checksum_before == a.codebook_checksum_after);
    CHECK(ibq::load_codebook(a.run_dir / "codebook.kfc").checksum() == in.codebook->checksum());
    for (const char* f : {"config.json", "telemetry.jsonl", "weights-best.kfw", "weights-6.kfw"}) {
        INFO(f);
        CHECK(std::filesystem::exists(a.run_dir / f));
    }

    const LoadedModel loaded = load_model(find_weights(a.run_dir));
    CHECK(loaded.vocabulary == corpus_vocabulary(in.corpus));
    CHECK(loaded.meta.at("codebook") == "test");
    CHECK(find_weights(a.last_checkpoint) == a.last_checkpoint);
}

TEST_CASE("300 steps on an 8-class corpus cut the total loss by 70 percent") {
    TrainInputs in;
    in.corpus = small_corpus(8, 64, 160, 16);
    ModelConfig m;
    m.image.input_size = 16;
    m.image.channels = {8, 16, 32};
    m.image.strides = {2, 2, 1};
    m.text.max_tokens = 32;
    m.text.hidden_dim = 16;
    m.text.n_layers = 1;
    m.text.n_heads = 2;
    m.text.ffn_dim = 32;
    m.shared_dim = 16;
    m.attention_heads = 4;
    m.code_dim = 16;
    in.model = m;
    in.codebook = random_codebook(32, 16, 5);
    TrainConfig config;
    config.batch_size = 16;
    config.epochs = 30;
    const TrainResult r = train(in, config, scratch("decrease"));
    REQUIRE(r.steps == 300);
    const double first = r.telemetry.front().total;
    double last_epoch = 0.0;
    for (std::size_t i = 290; i < 300; ++i) last_epoch += r.telemetry[i].total / 10.0;
    MESSAGE("step-1 total " << first << ", last-epoch mean " << last_epoch);
    CHECK(last_epoch <= 0.3 * first);
}
